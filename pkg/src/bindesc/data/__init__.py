"""Synthetic multi-view scenes, correspondences, patches and the patch archive."""
