"""Command line entry point: ``bindesc <subcommand> [options]``.

Every subcommand accepts ``--config FILE``.  The file holds ``key = value``
lines whose keys are the subcommand's long option names (dashes or
underscores); ``#`` starts a comment.  Flags given on the command line win
over the file.  Example::

    # train.cfg
    variant = didymos_pm
    epochs = 30
    batch-pairs = 512

The only environment variable read is ``BINDESC_CACHE_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("bindesc")

BUDGETS = (500, 1000, 5000)
BENCH_SHAPES = ("8x8x128x128",)
STEREO_SEED_OFFSET = 10 ** 6   # evaluation scenes never collide with generator seeds


# ---------------------------------------------------------------------------
# Config files and provenance
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


def read_config_file(path):
    """Parse ``key = value`` lines into a dict of strings."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(parser, values):
    known = {a.dest: a for a in parser._actions}
    defaults = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        a = known[k]
        if isinstance(a, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if v.lower() not in _TRUE | _FALSE:
                raise ConfigError(f"{k}: expected a boolean, got {v!r}")
            defaults[k] = v.lower() in _TRUE
        elif a.nargs in ("+", "*"):
            defaults[k] = [a.type(s) if a.type else s for s in v.replace(",", " ").split()]
        else:
            defaults[k] = a.type(v) if a.type else v
        if a.choices is not None:
            vals = defaults[k] if isinstance(defaults[k], list) else [defaults[k]]
            if any(x not in a.choices for x in vals):
                raise ConfigError(f"{k}: {v!r} not in {list(a.choices)}")
    parser.set_defaults(**defaults)


def git_checksum(data: bytes):
    """SHA-1 of the bytes framed like a git blob object."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def run_config(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    return json.loads(json.dumps(cfg, default=str))


def write_json(path, doc, args):
    """JSON output with the run config and a checksum of the payload embedded."""
    doc = {**doc, "run_config": run_config(args)}
    body = json.dumps(doc, sort_keys=True).encode()
    doc["checksum"] = git_checksum(body)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    return doc


def verify_json(path):
    """True if a JSON report's embedded checksum matches its content."""
    doc = json.loads(Path(path).read_text())
    chk = doc.pop("checksum", None)
    return chk == git_checksum(json.dumps(doc, sort_keys=True).encode())


def write_manifest(path, args, extra=None):
    """Sidecar ``<path>.manifest.json`` for binary or CSV outputs."""
    p = Path(path)
    doc = {"file": p.name, "checksum": git_checksum(p.read_bytes()),
           "run_config": run_config(args), **(extra or {})}
    mp = p.with_name(p.name + ".manifest.json")
    mp.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return mp


def set_threads(n):
    # the numba kernels are serial; BLAS and torch pools are the only ones
    from threadpoolctl import threadpool_limits
    import torch

    n = max(1, int(n))
    threadpool_limits(n)
    torch.set_num_threads(n)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _describe(model, patches):
    """float patches in [0,1] (N,32,32) -> descriptors, via the archive's uint8 path."""
    from bindesc.data.patches import to_uint8
    from bindesc.tensor import normalize_patches

    return model.describe(normalize_patches(to_uint8(patches)))


def _model(args):
    from bindesc import model as M

    if getattr(args, "model", None):
        return M.load_model(args.model)
    net = M.Network(M.build(args.variant, args.scaling), seed=args.seed)
    return net


def _metric(model):
    return "hamming" if model.spec.binary_descriptor else "euclidean"


def _detector_cfg(args):
    from bindesc.detect import DetectorConfig

    return DetectorConfig(max_keypoints=args.budget, contrast=args.contrast)


def save_descriptors(path, kps, desc, args, metric):
    """Keypoints plus descriptors; binary descriptors stay packed (32 bytes each)."""
    from bindesc import binquant as bq

    kp = np.array([(k.x, k.y, k.eta, k.score, k.octave) for k in kps], np.float64).reshape(-1, 5)
    if isinstance(desc, bq.BitTensor):
        raw = np.ascontiguousarray(desc.words.astype("<u8")).view(np.uint8)
        payload = {"packed": raw, "dim": np.array(desc.row_len)}
    else:
        payload = {"float": np.asarray(desc, np.float32)}
    meta = json.dumps({"metric": metric, "run_config": run_config(args)}, sort_keys=True)
    with open(path, "wb") as f:
        np.savez(f, keypoints=kp, meta=np.array(meta), **payload)
    write_manifest(path, args)


def load_descriptors(path):
    """(keypoints, descriptors, metric) from :func:`save_descriptors` output."""
    from bindesc import binquant as bq
    from bindesc.detect import Keypoint

    with np.load(path) as z:
        kp = z["keypoints"]
        meta = json.loads(str(z["meta"]))
        if "packed" in z:
            dim = int(z["dim"])
            nw = (dim + bq.WORD_BITS - 1) // bq.WORD_BITS
            words = z["packed"].view("<u8").astype(np.uint64).reshape(-1, nw)
            desc = bq.BitTensor(words, (len(words), dim), nw * bq.WORD_BITS - dim)
        else:
            desc = z["float"].astype(np.float64)
    kps = [Keypoint(r[0], r[1], r[2], r[3], int(r[4])) for r in kp]
    return kps, desc, meta["metric"]


def _pair_seed(scene_idx, va, vb):
    return int(scene_idx) * 10007 + va * 101 + vb


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from bindesc.data import archive as A
    from bindesc.data.pipeline import GenConfig, generate_archive

    cfg = GenConfig(n_scenes=args.scenes, modes=tuple(args.modes), seed=args.seed,
                    test_fraction=args.test_fraction, image_size=args.image_size,
                    detector={"contrast": args.contrast, "max_keypoints": args.max_keypoints})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ar, stats = generate_archive(cfg, progress=lambda i, n: log.info("scene %d: %d pairs", i, n))
    ar.meta["run_config"] = run_config(args)
    A.archive_write(out, ar)
    counts = {s: int(len(ar.split_indices(s))) for s in A.SPLITS}
    write_manifest(out, args, {"stats": stats, "pairs": counts, "patches": int(len(ar.patches))})
    print(f"{out}: {len(ar.pairs)} pairs ({counts['train']} train / {counts['test']} test), "
          f"{len(ar.patches)} patches")
    print("rejections: " + ", ".join(f"{k}={v}" for k, v in stats.items()
                                     if k.startswith("rejected_")))
    return 0


def cmd_train(args):
    from bindesc import train as TR
    from bindesc.data.archive import archive_read

    ar = archive_read(args.archive)
    cfg = TR.TrainConfig(variant=args.variant, scaling_variant=args.scaling, epochs=args.epochs,
                         batch_pairs=args.batch_pairs, lr=args.lr, seed=args.seed,
                         keep_epoch_checkpoints=args.keep_checkpoints)
    out = Path(args.out)
    res = TR.train(cfg, ar, out, resume=not args.no_resume,
                   progress=lambda e, b, c: log.debug("epoch %d batch %d total %.5f", e, b, c[0]))
    for h in res.history:
        print(f"epoch {h['epoch']}: total={h['total']:.5f} triplet={h['triplet']:.5f} "
              f"sos={h['sos']:.5f} r_l2={h['r_l2']:.5f}")
    write_manifest(out / "last.ckpt", args)
    write_manifest(out / "loss.csv", args)
    if args.plot:
        from bindesc import plotting

        plotting.loss_curves(TR.read_loss_csv(out / "loss.csv"), out / "loss.png")
    return 0


def cmd_export(args):
    from bindesc import model as M

    ck = M.load(args.checkpoint)
    M.export_packed(ck.to_network(), args.out, {"source": str(args.checkpoint),
                                               "run_config": run_config(args)})
    write_manifest(args.out, args)
    print(f"{args.out}: {os.path.getsize(args.out)} bytes")
    return 0


def cmd_extract(args):
    from bindesc.data.scene import read_image
    from bindesc.detect import detect_and_extract

    model = _model(args)
    img = read_image(args.image)
    kps, patches = detect_and_extract(img, args.detector, _detector_cfg(args))
    desc = _describe(model, patches)
    save_descriptors(args.out, kps, desc, args, _metric(model))
    print(f"{args.out}: {len(kps)} keypoints")
    return 0


def cmd_match(args):
    from bindesc import evaluate as E

    ka, da, ma = load_descriptors(args.a)
    kb, db, mb = load_descriptors(args.b)
    if ma != mb:
        raise E.MetricError(f"descriptor kinds differ: {ma} vs {mb}")
    if args.scene:
        from bindesc.data.scene import load_scene

        scene = load_scene(args.scene)
        va, vb = args.views
        rep = E.evaluate_pair(ka, kb, da, db, scene, va, vb, ma, seed=_pair_seed(0, va, vb))
        doc = {"pairs": [rep.to_dict()], "aggregate": E.aggregate([rep])}
    else:
        m = E.match_descriptors(da, db, ma)
        doc = {"matches": [[int(a), int(b), float(d)] for a, b, d in zip(m.idx_a, m.idx_b, m.dist)]}
    write_json(args.out, doc, args)
    print(f"{args.out}: {len(doc['pairs'][0]['matches']) if args.scene else len(doc['matches'])} "
          "matches")
    return 0


def eval_patches(model, archive, split="test", seed=0, max_pairs=None):
    """FPR95 and the raw verification distances on one archive split."""
    from bindesc import evaluate as E

    idx = archive.split_indices(split)
    if max_pairs is not None and len(idx) > max_pairs:
        idx = np.sort(np.random.default_rng(seed).choice(idx, max_pairs, replace=False))
    a, b = archive.pair_patches(idx)
    da, db = model.describe(a), model.describe(b)
    v = E.verification_set(da, db, np.random.default_rng(seed), _metric(model))
    return E.fpr95(v), v


def _stereo_scenes(args):
    from bindesc.data.scene import SceneConfig, load_scene, synth_scene

    if args.scene_dir:
        for i, d in enumerate(args.scene_dir):
            yield i, load_scene(d)
        return
    cfg = SceneConfig(size=args.image_size)
    modes = args.modes
    for i in range(args.scenes):
        yield i, synth_scene(STEREO_SEED_OFFSET + args.seed * 1000 + i, modes[i % len(modes)], cfg)


def eval_stereo(model, args):
    from bindesc import evaluate as E
    from bindesc.data import geometry as G
    from bindesc.detect import detect_and_extract

    det = _detector_cfg(args)
    reports = []
    for si, scene in _stereo_scenes(args):
        feats = []
        for img in scene.images:
            kps, patches = detect_and_extract(img, args.detector, det)
            feats.append((kps, _describe(model, patches) if len(kps) else None))
        for va, vb in itertools.combinations(range(scene.n_views), 2):
            if G.rotation_angle_deg(scene.poses[va].q, scene.poses[vb].q) > args.max_angle:
                continue
            (ka, da), (kb, db) = feats[va], feats[vb]
            if da is None or db is None:
                continue
            reports.append(E.evaluate_pair(ka, kb, da, db, scene, va, vb, _metric(model),
                                           seed=_pair_seed(si, va, vb), name=f"{si}:{va}-{vb}"))
    return reports


def cmd_eval(args):
    from bindesc import evaluate as E

    model = _model(args)
    out = Path(args.out)
    if args.mode == "patch":
        from bindesc.data.archive import archive_read

        ar = archive_read(args.archive)
        score, v = eval_patches(model, ar, args.split, args.seed, args.max_pairs)
        doc = {"fpr95": score, "positives": int(len(v.positive)), "split": args.split,
               "metric": _metric(model)}
        print(f"FPR95 ({args.split}, {len(v.positive)} pairs): {score:.4f}")
        if args.plot:
            from bindesc import plotting

            plotting.distance_histograms(v.positive, v.negative, out.with_suffix(".png"),
                                         np.percentile(v.positive, 95))
    else:
        reports = eval_stereo(model, args)
        agg = E.aggregate(reports)
        doc = {"pairs": [r.to_dict() for r in reports], "aggregate": agg,
               "table": _table_row(agg)}
        print(json.dumps(doc["table"]))
        if args.plot:
            from bindesc import plotting

            plotting.pose_error_curve([r.pose_error_deg for r in reports], out.with_suffix(".png"))
    write_json(out, doc, args)
    return 0


def _table_row(agg):
    """Aggregate in percent, keyed like the benchmark table's columns."""
    pct = (lambda v: None if v is None else 100.0 * v)
    row = {"#matches": agg["matches"], "P": pct(agg["precision"]), "R": pct(agg["recall"]),
           "A": pct(agg["accuracy"])}
    for k, v in agg.items():
        if k.startswith("auc@"):
            row["AUC@" + k[4:]] = pct(v)
    return row


def cmd_count_ops(args):
    from bindesc import model as M

    variants = args.variant or list(M.VARIANTS)
    doc = {}
    for v in variants:
        oc = M.count_ops(M.build(v, args.scaling))
        doc[v] = {**oc.to_dict(), "binary_mflops_equiv": oc.bops / 64 / 1e6,
                  "float_mflops": oc.flops / 1e6}
        print(f"{v:18s} {oc.mflops_equiv:9.4f} MFLOPs  (float {oc.flops / 1e6:.4f}, "
              f"binary {oc.bops / 64 / 1e6:.4f} = {oc.bops / 1e6:.3f} MBOPs / 64)")
    if args.out:
        write_json(args.out, doc, args)
    return 0


def parse_shape(s):
    """``HxWxCINxCOUT`` (3x3 kernel, stride 1, padding 1)."""
    try:
        h, w, ci, co = (int(v) for v in s.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad shape {s!r}; expected HxWxCINxCOUT") from None
    return h, w, ci, co


def bench_shape(shape, batch=64, reps=30, warmup=3, seed=0):
    """Median seconds of float vs binary 3x3 convolution on one shape.

    The binary timing includes packing the ±1 activations; weights are
    packed once up front as they would be in a deployed model.
    """
    from bindesc import binquant as bq
    from bindesc import tensor as T

    h, w, ci, co = shape
    rng = np.random.default_rng(seed)
    x = np.where(rng.random((batch, ci, h, w)) < 0.5, -1.0, 1.0).astype(np.float32)
    wt = np.where(rng.random((co, ci, 3, 3)) < 0.5, -1.0, 1.0).astype(np.float32)
    wb = bq.pack_weights(wt)
    runs = {"float": lambda: T.conv2d_forward(x, wt, 1, 1),
            "binary": lambda: bq.binary_conv2d(bq.pack_activations(x), wb, 1, 1)}
    out = {}
    for name, fn in runs.items():
        for _ in range(warmup):
            fn()
        ts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
        out[name] = float(np.median(ts))
    return out


def cmd_bench_kernels(args):
    rows = []
    for s in args.shapes:
        shape = parse_shape(s)
        t = bench_shape(shape, args.batch, args.reps, seed=args.seed)
        for prec in ("float", "binary"):
            rows.append({"shape": s, "precision": prec, "batch": args.batch, "reps": args.reps,
                         "median_s": t[prec], "speedup": t["float"] / t[prec]})
        print(f"{s}: float {t['float'] * 1e3:.3f} ms, binary {t['binary'] * 1e3:.3f} ms, "
              f"speedup {t['float'] / t['binary']:.2f}x")
    if args.out:
        with open(args.out, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
        write_manifest(args.out, args)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _model_opts(p, required=False):
    from bindesc import binquant as bq
    from bindesc import model as M

    p.add_argument("--model", required=required, help="checkpoint or packed export")
    p.add_argument("--variant", default="didymos", choices=M.VARIANTS,
                   help="architecture for random weights when --model is absent")
    p.add_argument("--scaling", default="none", choices=bq.SCALING_VARIANTS)


def _detect_opts(p):
    p.add_argument("--detector", default="dog", choices=("dog", "fast"))
    p.add_argument("--budget", type=int, default=1000, choices=BUDGETS)
    p.add_argument("--contrast", type=float, default=0.01, help="DoG contrast threshold")


def build_parser():
    from bindesc import binquant as bq
    from bindesc import model as M

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with option defaults")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--plot", action="store_true", help="also write PNG figures")

    ap = argparse.ArgumentParser(prog="bindesc", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a patch archive")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=60)
    p.add_argument("--modes", nargs="+", default=["planar", "heightfield"],
                   choices=("planar", "heightfield"))
    p.add_argument("--image-size", type=int, default=384)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--contrast", type=float, default=0.01)
    p.add_argument("--max-keypoints", type=int, default=2000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a descriptor network")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--variant", default="didymos", choices=M.VARIANTS)
    p.add_argument("--scaling", default="none", choices=bq.SCALING_VARIANTS)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-pairs", type=int, default=512)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--keep-checkpoints", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", parents=[common], help="pack a checkpoint for inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("extract", parents=[common], help="detect and describe one image")
    _model_opts(p)
    _detect_opts(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", parents=[common], help="match two descriptor files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scene", help="scene directory for ground-truth scoring")
    p.add_argument("--views", type=int, nargs=2, default=[0, 1])
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", parents=[common], help="patch verification or stereo evaluation")
    _model_opts(p)
    _detect_opts(p)
    p.add_argument("--mode", default="patch", choices=("patch", "stereo"))
    p.add_argument("--out", required=True)
    p.add_argument("--archive", help="patch mode: archive to evaluate")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--scene-dir", nargs="+", help="stereo mode: saved scene directories")
    p.add_argument("--scenes", type=int, default=10, help="stereo mode: synthetic scene count")
    p.add_argument("--modes", nargs="+", default=["planar", "heightfield"],
                   choices=("planar", "heightfield"))
    p.add_argument("--image-size", type=int, default=384)
    p.add_argument("--max-angle", type=float, default=60.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-ops", parents=[common], help="per-descriptor operation counts")
    p.add_argument("--variant", nargs="+", choices=M.VARIANTS)
    p.add_argument("--scaling", default="none", choices=bq.SCALING_VARIANTS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_count_ops)

    p = sub.add_parser("bench-kernels", parents=[common], help="float vs binary conv timing")
    p.add_argument("--shapes", nargs="+", default=list(BENCH_SHAPES))
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_kernels)
    return ap


def parse_args(argv=None):
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = ap._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subs), None)
    if known.config and command:
        values = read_config_file(known.config)
        sub = subs[command]
        _apply_config(sub, values)
        for a in sub._actions:
            if a.dest in values:
                a.required = False
    args = ap.parse_args(argv)
    if args.command == "eval" and args.mode == "patch" and not args.archive:
        ap.error("eval --mode patch needs --archive")
    return args


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"bindesc {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
