"""Command-line entry point: ``hd3d <command> [flags]``.

Failures print one line ``hd3d: error: category=<cat> type=<name>: <message>``
to stderr and exit with 2 (usage), 3 (io), 4 (data-invalid) or
5 (numeric-failure).
"""
import argparse
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import _accel
from .errors import EXIT_CODES, HD3DError, UnboundInput

ARCHS = ("hyperdense", "baseline", "plain")


class UsageError(HD3DError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(text):
    parts = text.lower().replace(",", "x").split("x")
    try:
        d = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use N or DxHxW") from None
    if len(d) == 1:
        d = d * 3
    if len(d) != 3 or min(d) < 1:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use N or DxHxW")
    return d


def _spacing(text):
    try:
        s = tuple(float(p) for p in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad spacing {text!r}") from None
    if len(s) == 1:
        s = s * 3
    if len(s) != 3 or min(s) <= 0:
        raise argparse.ArgumentTypeError(f"bad spacing {text!r}; use MM or MMxMMxMM")
    return s


def _write_text(path, text):
    from .volio import atomic_write
    atomic_write(path, text.encode("utf-8"))


# -- commands -----------------------------------------------------------------

def cmd_generate_phantom(a):
    from .phantom import PhantomConfig, generate
    from .volio import write_manifest, write_subject
    os.makedirs(a.out, exist_ok=True)
    entries = []
    for i in range(a.subjects):
        cfg = PhantomConfig(dims=a.dims, seed=a.seed * 1000 + i, noise_sigma=a.noise_sigma,
                            bias_amplitude=a.bias_amplitude,
                            perturb_amplitude=a.perturb_amplitude)
        sid = f"subject{i:03d}"
        subj = generate(cfg, sid)
        write_subject(os.path.join(a.out, sid), subj)
        entries.append((sid, sid))
        print(f"wrote {os.path.join(a.out, sid)}")
    write_manifest(os.path.join(a.out, "manifest.txt"), entries)
    print(f"wrote {os.path.join(a.out, 'manifest.txt')}")
    return 0


TRAIN_FLAGS = {"epochs": "epochs", "subepochs": "subepochs", "samples": "samples",
               "batch": "batch", "lr": "lr", "seed": "seed", "edge": "edge",
               "momentum": "momentum", "dropout": "dropout_rate", "conv_method": "conv_method"}


def resolve_train_config(a):
    """Defaults < config file < flags.  Returns the resolved dict."""
    from .train import TrainConfig
    resolved = {"arch": "hyperdense", "width": 1.0, "train": asdict(TrainConfig()),
                "paths": {}}
    if a.config:
        try:
            with open(a.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"--config {a.config}: not valid JSON ({e})") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"--config {a.config}: top level must be an object")
        unknown = set(file_cfg) - {"arch", "width", "train", "paths"}
        if unknown:
            raise UsageError(f"--config {a.config}: unknown keys {sorted(unknown)}")
        known = {f.name for f in fields(TrainConfig)}
        bad = set(file_cfg.get("train", {})) - known
        if bad:
            raise UsageError(f"--config {a.config}: unknown train keys {sorted(bad)}")
        for k in ("arch", "width"):
            if k in file_cfg:
                resolved[k] = file_cfg[k]
        resolved["train"].update(file_cfg.get("train", {}))
        resolved["paths"].update(file_cfg.get("paths", {}))
    if a.arch is not None:
        resolved["arch"] = a.arch
    if a.width is not None:
        resolved["width"] = a.width
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(a, flag)
        if v is not None:
            resolved["train"][key] = v
    if a.unbalanced:
        resolved["train"]["balanced"] = False
    for k in ("train", "val", "out", "resume"):
        v = getattr(a, k if k != "train" else "train_manifest")
        if v is not None:
            resolved["paths"][k] = v
    if resolved["arch"] not in ARCHS:
        raise UsageError(f"--arch: unknown architecture {resolved['arch']!r}")
    for need in ("train", "out"):
        if not resolved["paths"].get(need):
            raise UsageError(f"--{need} is required (flag or config paths.{need})")
    return resolved


def cmd_train(a):
    from .netbuild import standard_spec
    from .train import TrainConfig, train
    from .volio import load_checkpoint, read_manifest, read_subject
    r = resolve_train_config(a)
    cfg = TrainConfig(**r["train"])
    spec = standard_spec(r["arch"], width=float(r["width"]), dropout_rate=cfg.dropout_rate)
    paths = r["paths"]
    subjects = [read_subject(d, sid) for sid, d in read_manifest(paths["train"])]
    val = read_subject(paths["val"]) if paths.get("val") else None
    out = paths["out"]
    os.makedirs(out, exist_ok=True)
    snapshot = dict(r, spec=json.loads(spec.to_text()))
    _write_text(os.path.join(out, "resolved_config.json"),
                json.dumps(snapshot, sort_keys=True, indent=2) + "\n")
    resume = load_checkpoint(paths["resume"]) if paths.get("resume") else None
    ckpt, log = train(spec, subjects, val, cfg, out_dir=out, resume=resume,
                      verbose=a.verbose)
    print(f"trained {ckpt.progress['epochs_done']} epoch(s), {ckpt.progress['steps']} steps; "
          f"best validation DC {ckpt.progress['best_val']:.4f} at epoch "
          f"{ckpt.progress['best_epoch']}")
    print(f"wrote {os.path.join(out, 'latest.ckpt')}, {os.path.join(out, 'best.ckpt')}, "
          f"{os.path.join(out, 'train_log.csv')}")
    return 0


def cmd_segment(a):
    from .infer import segment
    from .volio import Volume, load_checkpoint, read_subject, write_rawvol
    ckpt = load_checkpoint(a.checkpoint)
    subj = read_subject(a.subject)
    labels, probs = segment(ckpt, subj, core=a.core, conv_method=a.conv_method)
    os.makedirs(a.out, exist_ok=True)
    write_rawvol(os.path.join(a.out, "label.rawvol"), Volume(labels, subj.spacing, "label"), "u8")
    print(f"wrote {os.path.join(a.out, 'label.rawvol')}")
    if a.probs:
        for k, name in enumerate(("bg", "csf", "gm", "wm")):
            p = os.path.join(a.out, f"prob_{name}.rawvol")
            write_rawvol(p, Volume(probs[k], subj.spacing, "intensity"), "f32")
            print(f"wrote {p}")
    return 0


def cmd_evaluate(a):
    from .metrics import evaluate, format_table
    from .volio import read_volume
    pred = read_volume(a.pred, "label")
    ref = read_volume(a.ref, "label")
    spacing = a.spacing or ref.spacing
    sid = a.subject or os.path.basename(os.path.dirname(os.path.abspath(a.ref))) or "subject"
    rep = evaluate(np.rint(pred.data).astype(np.int64), np.rint(ref.data).astype(np.int64),
                   spacing, sid, a.mhd_mode)
    lines = ["subject,class,dc,mhd,asd,mhd_variant"]
    for row in rep.rows(a.all_variants):
        lines.append(",".join([row[0], row[1]] + [repr(float(v)) for v in row[2:5]] + [row[5]]))
    csv_text = "\n".join(lines) + "\n"
    print(format_table([rep], a.all_variants))
    if a.out:
        _write_text(a.out, csv_text)
        print(f"wrote {a.out}")
    else:
        print()
        sys.stdout.write(csv_text)
    return 0


def cmd_gradcheck(a):
    from . import gradcheck
    names = "all" if a.op == "all" else [a.op]
    results = gradcheck.run(names, seed=a.seed, n_coords=a.coords)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"gradcheck {'PASS' if ok else 'FAIL'} (seed {a.seed}, tolerance {gradcheck.TOL:g})")
    return 0 if ok else EXIT_CODES["numeric-failure"]


def summarize_log(log):
    """Per-epoch rows: epoch, lr, mean train loss, mean train DC, last train DC, val DC."""
    out = []
    for e in sorted({r["epoch"] for r in log.rows}):
        tr = [r for r in log.rows if r["epoch"] == e and r["phase"] == "train"]
        va = [r for r in log.rows if r["epoch"] == e and r["phase"] == "val"]
        out.append({"epoch": e, "lr": tr[0]["lr"] if tr else float("nan"),
                    "train_loss": float(np.mean([r["loss"] for r in tr])) if tr else float("nan"),
                    "train_dc": float(np.mean([r["dc_mean"] for r in tr])) if tr else float("nan"),
                    "train_dc_last": tr[-1]["dc_mean"] if tr else float("nan"),
                    "val_dc": va[-1]["dc_mean"] if va else float("nan")})
    return out


def cmd_summarize(a):
    from .train import TrainLog
    log = TrainLog.read(a.log)
    rows = summarize_log(log)
    print(f"{'epoch':>5s} {'lr':>10s} {'train_loss':>10s} {'train_dc':>9s} "
          f"{'last_dc':>8s} {'val_dc':>8s}")
    for r in rows:
        print(f"{r['epoch']:5d} {r['lr']:10.3e} {r['train_loss']:10.4f} {r['train_dc']:9.4f} "
              f"{r['train_dc_last']:8.4f} {r['val_dc']:8.4f}")
    if a.plot_data:
        n_sub = max((r["subepoch"] for r in log.rows), default=1) or 1
        lines = ["series,epoch,subepoch,x,dc_mean,loss"]
        for r in log.rows:
            x = r["epoch"] - 1 + (r["subepoch"] / n_sub if r["phase"] == "train" else 1.0)
            lines.append(f"{r['phase']},{r['epoch']},{r['subepoch']},{x!r},"
                         f"{r['dc_mean']!r},{r['loss']!r}")
        _write_text(a.plot_data, "\n".join(lines) + "\n")
        print(f"wrote {a.plot_data}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap numba/BLAS worker threads (default: $HD3D_THREADS, else all)")

    p = _Parser(prog="hd3d", description="Hyper-dense 3D segmentation toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("generate-phantom", parents=[common],
                       help="write synthetic labelled subjects and a manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--subjects", type=int, default=5, help="number of subjects (default 5)")
    g.add_argument("--dims", type=_dims, default=(64, 64, 64),
                   help="volume size, N or DxHxW (default 64)")
    g.add_argument("--seed", type=int, default=0, help="base seed; subject i uses seed*1000+i")
    g.add_argument("--noise-sigma", type=float, default=0.03,
                   help="noise sd as a fraction of each modality's range (default 0.03)")
    g.add_argument("--bias-amplitude", type=float, default=0.0,
                   help="multiplicative bias-field amplitude in [0, 0.2] (default 0)")
    g.add_argument("--perturb-amplitude", type=float, default=0.015,
                   help="relative amplitude of interface perturbations (default 0.015)")
    g.set_defaults(func=cmd_generate_phantom)

    t = sub.add_parser("train", parents=[common], help="train a network on sub-volumes")
    t.add_argument("--config", help="JSON config with keys arch, width, train{...}, paths{...}")
    t.add_argument("--arch", choices=ARCHS, default=None, help="architecture (default hyperdense)")
    t.add_argument("--width", type=float, default=None,
                   help="scale all kernel counts except the classifier (default 1.0)")
    t.add_argument("--train", dest="train_manifest", default=None,
                   help="manifest of training subjects")
    t.add_argument("--val", default=None, help="validation subject directory")
    t.add_argument("--out", default=None, help="output directory for checkpoints and log")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, default=None, help="epochs (default 30)")
    t.add_argument("--subepochs", type=int, default=None, help="subepochs per epoch (default 20)")
    t.add_argument("--samples", type=int, default=None,
                   help="samples per subepoch (default 1000)")
    t.add_argument("--batch", type=int, default=None, help="batch size (default 5)")
    t.add_argument("--lr", type=float, default=None, help="initial learning rate (default 0.001)")
    t.add_argument("--momentum", type=float, default=None, help="momentum (default 0.6)")
    t.add_argument("--dropout", type=float, default=None,
                   help="dropout rate of the fully-conv layers (default 0.5)")
    t.add_argument("--edge", type=int, default=None, help="training sub-volume edge (default 27)")
    t.add_argument("--seed", type=int, default=None, help="seed for init, sampling and dropout")
    t.add_argument("--unbalanced", action="store_true",
                   help="draw sample centres uniformly in the brain mask")
    t.add_argument("--conv-method", choices=("lowered", "direct"), default=None,
                   help="convolution kernel (default lowered)")
    t.add_argument("--verbose", action="store_true", help="print progress to stderr")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", parents=[common], help="tiled full-volume inference")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--subject", required=True, help="subject directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--probs", action="store_true", help="also write per-class probabilities")
    s.add_argument("--core", type=int, default=17, help="output core edge per tile (default 17)")
    s.add_argument("--conv-method", choices=("lowered", "direct"), default=None,
                   help="convolution kernel (default lowered)")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("evaluate", parents=[common], help="DC / MHD / ASD per tissue class")
    e.add_argument("--pred", required=True, help="predicted label volume (.rawvol or .nii)")
    e.add_argument("--ref", required=True, help="reference label volume")
    e.add_argument("--spacing", type=_spacing, default=None,
                   help="voxel spacing in mm, MM or MMxMMxMM (default: from --ref)")
    e.add_argument("--mhd-mode", choices=("percentile95", "dubuisson_jain"),
                   default="percentile95", help="MHD definition (default percentile95)")
    e.add_argument("--all-variants", action="store_true", help="report both MHD definitions")
    e.add_argument("--subject", default=None, help="subject id for the report")
    e.add_argument("--out", default=None, help="write the CSV here instead of stdout")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("--op", default="all",
                   choices=("all", "conv3d", "conv3d_1x1", "batchnorm", "prelu", "dropout",
                            "softmax_xent", "hyperdense3"),
                   help="primitive to check (default all)")
    c.add_argument("--seed", type=int, default=0, help="seed for data and coordinates")
    c.add_argument("--coords", type=int, default=100,
                   help="sampled coordinates per tensor (default 100)")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("summarize", parents=[common], help="per-epoch view of a training log")
    m.add_argument("--log", required=True, help="train_log.csv")
    m.add_argument("--plot-data", default=None, help="write a plot-ready CSV series here")
    m.set_defaults(func=cmd_summarize)
    return p


def _fail(exc, category):
    msg = str(exc).replace("\n", " ")
    print(f"hd3d: error: category={category} type={type(exc).__name__}: {msg}", file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None):
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if not getattr(a, "command", None):
            raise UsageError("a command is required; see hd3d --help")
        _accel.set_threads(a.threads)
        return a.func(a)
    except HD3DError as e:
        return _fail(e, e.category)
    except (OSError, EOFError) as e:
        return _fail(e, "io")
    except (FloatingPointError, OverflowError) as e:
        return _fail(e, "numeric-failure")
    except (ValueError, KeyError, TypeError) as e:
        return _fail(e, "data-invalid")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
