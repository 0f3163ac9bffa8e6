"""Command-line entry point: ``crlsr <command> [flags]``.

Commands: degrade, train, eval, gradcheck, ablate, kernels. Each writes its
outputs and a ``manifest.json`` into ``--out-dir`` (default
``$CRLSR_OUT_ROOT/<command>``, with ``CRLSR_OUT_ROOT`` defaulting to ``runs``).

Exit codes: 0 success, 1 a check reported FAIL rows, 2 config error, 3 data
error, 4 numeric failure. Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ablation, gradcheck
from . import data as builtin_data
from . import network as net
from .degradation import (DegradationSpec, GaussianKernelSpec, KernelField, bicubic_resize, degrade,
                          field_kernels)
from .imaging import ImageError, format_psnr, load_png, psnr_y, save_png
from .rng import Rng
from .training import NumericError, Trainer, load_train_config

log = logging.getLogger("crlsr")

OUT_ROOT_ENV = "CRLSR_OUT_ROOT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

MANIFEST_CSV = ("hr_path", "lr_path", "spec_json", "seed")
EVAL_CSV = ("image_id", "scale", "sigma_or_field", "noise", "psnr_db", "bicubic_psnr_db")


class ConfigError(ValueError):
    pass


class DataError(OSError):
    pass


class CheckFailed(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    version: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    argv: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        missing = [p for p in self.outputs if not (out_dir / p).exists()]
        if missing:
            raise DataError(f"manifest names missing outputs: {missing}")
        path = out_dir / "manifest.json"
        _atomic_write(path, json.dumps(asdict(self), indent=2) + "\n")
        return path


# ----------------------------------------------------------------- helpers

def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _version() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:  # noqa: BLE001
        return "unknown"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _out_dir(args, command: str) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    else:
        out = Path(os.environ.get(OUT_ROOT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_spec(path) -> DegradationSpec:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: spec file not found")
    try:
        return DegradationSpec.from_json(p.read_text())
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def _hr_files(hr_dir) -> list[Path]:
    d = Path(hr_dir)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"{d}: no PNG files")
    return files


def mod_crop(img: np.ndarray, scale: int) -> np.ndarray:
    _, h, w = img.shape
    return img[:, :h - h % scale, :w - w % scale]


def image_spec(spec: DegradationSpec, base_seed: int, index: int) -> DegradationSpec:
    """Per-image spec whose noise seed depends only on (base seed, image index)."""
    return replace(spec, seed=Rng(base_seed).derive(index).next_u64())


def describe_kernel(spec: DegradationSpec) -> str:
    k = spec.kernel
    if isinstance(k, KernelField):
        return f"field[{k.sigma_min:g},{k.sigma_max:g}]"
    if k.variant == "isotropic":
        return f"{k.sigma:g}"
    return f"aniso[{k.theta:g},{k.lambda1:g},{k.lambda2:g}]"


def describe_noise(spec: DegradationSpec) -> str:
    n = spec.noise
    if n.variant == "constant":
        return f"{n.level:g}"
    return f"ramp[{n.level_min:g},{n.level_max:g}]"


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------- commands

def cmd_degrade(args) -> list[str]:
    spec = _read_spec(args.spec)
    files = _hr_files(args.hr_dir)
    out = _out_dir(args, "degrade")
    base = args.seed = spec.seed if args.seed is None else args.seed
    (out / "lr").mkdir(exist_ok=True)

    def one(item):
        i, path = item
        hr = mod_crop(load_png(path), spec.scale)
        s = image_spec(spec, base, i)
        lr = degrade(hr, s)
        rel = f"lr/{path.stem}.png"
        save_png(lr, out / rel, bits=args.bits)
        return {"hr_path": str(path), "lr_path": rel, "spec_json": s.to_json(), "seed": s.seed}

    rows = _map(one, list(enumerate(files)), args.workers)
    _atomic_write(out / "manifest.csv", _csv_text(MANIFEST_CSV, rows))
    log.info("degraded %d images into %s", len(rows), out)
    return [r["lr_path"] for r in rows] + ["manifest.csv"]


def _train_images(data_cfg: dict, base: Path) -> list[np.ndarray]:
    if "hr_dir" in data_cfg:
        hr_dir = Path(data_cfg["hr_dir"])
        if not hr_dir.is_absolute():
            hr_dir = base / hr_dir
        return [load_png(p) for p in _hr_files(hr_dir)]
    n = int(data_cfg.get("n", 20))
    size = int(data_cfg.get("size", 128))
    return builtin_data.training_images(n, size, int(data_cfg.get("seed", 0)))


def cmd_train(args) -> list[str]:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise ConfigError(f"{cfg_path}: config file not found")
    try:
        net_cfg, train_cfg, optim_cfg, loss_cfg, data_cfg = load_train_config(cfg_path)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{cfg_path}: {exc}") from None
    images = _train_images(data_cfg, cfg_path.parent)
    out = _out_dir(args, "train")
    ckpt, log_csv = out / "checkpoint.ckpt", out / "train_log.csv"
    if args.resume:
        trainer = Trainer.resume(args.resume, images)
    else:
        if log_csv.exists():
            log_csv.unlink()
        trainer = Trainer(images, net_cfg, train_cfg, optim_cfg, loss_cfg)
    args.seed = trainer.train_cfg.seed
    remaining = trainer.train_cfg.steps - trainer.step
    if remaining > 0:
        trainer.run(remaining, log_path=log_csv, ckpt_path=ckpt)
    else:
        trainer.save(ckpt)
    outputs = ["checkpoint.ckpt"]
    if log_csv.exists():
        outputs.append("train_log.csv")
    return outputs


def _load_infer(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: checkpoint not found")
    try:
        params, meta, _ = net.load_checkpoint(p, modules=net.INFER_MODULES)
    except (ValueError, KeyError, EOFError) as exc:
        raise DataError(f"{p}: unreadable checkpoint ({exc})") from None
    return params, meta


def cmd_eval(args) -> list[str]:
    spec = _read_spec(args.spec)
    params, _ = _load_infer(args.ckpt)
    cfg = params.config
    if cfg.scale != spec.scale:
        raise ConfigError(f"checkpoint scale {cfg.scale} differs from spec scale {spec.scale}")
    files = _hr_files(args.hr_dir)
    out = _out_dir(args, "eval")
    base = args.seed = spec.seed if args.seed is None else args.seed

    def one(item):
        i, path = item
        hr = mod_crop(load_png(path), spec.scale)
        s = image_spec(spec, base, i)
        lr = degrade(hr, s)
        sr = np.clip(net.forward_infer(lr, params, cfg).astype(np.float64), 0.0, 1.0)
        up = np.clip(bicubic_resize(lr, spec.scale, "up"), 0.0, 1.0)
        if args.save_sr:
            save_png(sr, out / "sr" / f"{path.stem}.png")
        return (path.stem, psnr_y(sr, hr, spec.scale), psnr_y(up, hr, spec.scale))

    results = _map(one, list(enumerate(files)), args.workers)
    kdesc, ndesc = describe_kernel(spec), describe_noise(spec)
    rows = [{"image_id": name, "scale": spec.scale, "sigma_or_field": kdesc, "noise": ndesc,
             "psnr_db": format_psnr(p), "bicubic_psnr_db": format_psnr(b)} for name, p, b in results]
    mean_p = float(np.mean([p for _, p, _ in results]))
    mean_b = float(np.mean([b for _, _, b in results]))
    rows.append({"image_id": "mean", "scale": spec.scale, "sigma_or_field": kdesc, "noise": ndesc,
                 "psnr_db": format_psnr(mean_p), "bicubic_psnr_db": format_psnr(mean_b)})
    _atomic_write(out / "eval.csv", _csv_text(EVAL_CSV, rows))
    print(f"mean Y-PSNR {format_psnr(mean_p)} dB (bicubic {format_psnr(mean_b)} dB) over {len(results)} images")
    outputs = ["eval.csv"]
    if args.save_sr:
        outputs += [f"sr/{name}.png" for name, _, _ in results]
    return outputs


DEFAULT_FAULTS = ("conv2d", "matmul", "log_sum_exp")


def cmd_gradcheck(args) -> list[str]:
    faults = tuple(args.fault or ()) or (DEFAULT_FAULTS if args.inject_fault else ())
    dtypes = ("float64", "float32") if args.dtype == "both" else (args.dtype,)
    rows = gradcheck.run_suite(dtypes=dtypes, seed=args.seed, cases=args.case, fault=faults)
    out = _out_dir(args, "gradcheck")
    table = [r.row() for r in rows]
    _atomic_write(out / "gradcheck.csv", _csv_text(gradcheck.CSV_FIELDS, table))
    width = max(len(r.case) for r in rows)
    for r in table:
        print(f"{r['status']}  {r['case']:<{width}}  v{r['variant']}  {r['dtype']}  "
              f"{r['rel_error']} (tol {r['tol']})")
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} passed" + (f"; faults injected into {list(faults)}" if faults else ""))
    args._check_failed = failed > 0
    return ["gradcheck.csv"]


def cmd_ablate(args) -> list[str]:
    modes = args.mode or list(ablation.MODES)
    cfg = ablation.AblationConfig(m=args.m, s=args.s, steps=args.steps, lr=args.lr, seed=args.seed)
    rows = []
    for mode in modes:
        curve = ablation.run(mode, cfg)
        rows += curve
        print(f"{mode:<9} alignment {curve[0]['alignment']:.6f} -> {curve[-1]['alignment']:.6f}")
    out = _out_dir(args, "ablate")
    _atomic_write(out / "alignment_curves.csv", ablation.curves_csv(rows))
    _atomic_write(out / "ablation_config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return ["alignment_curves.csv", "ablation_config.json"]


def cmd_kernels(args) -> list[str]:
    spec = _read_spec(args.spec)
    out = _out_dir(args, "kernels")
    if isinstance(spec.kernel, KernelField):
        ks = field_kernels(spec.kernel, args.width)
        picks = sorted({0, args.width // 2, args.width - 1})
        named = [(f"kernel_col{j:04d}", ks[j]) for j in picks]
    else:
        named = [("kernel", spec.kernel.make())]
    outputs = []
    for stem, k in named:
        save_png(k / k.max(), out / f"{stem}.png", bits=16)
        buf = io.StringIO()
        np.savetxt(buf, k, fmt="%.12e")
        _atomic_write(out / f"{stem}.txt", buf.getvalue())
        outputs += [f"{stem}.png", f"{stem}.txt"]
    return outputs


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crlsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--out-dir", help=f"output directory (default ${OUT_ROOT_ENV}/<command>)")
        sp.add_argument("--seed", type=int, default=seed_default)
        return sp

    d = common(sub.add_parser("degrade", help="synthesize LR images from a directory of HR PNGs"))
    d.add_argument("--hr-dir", required=True)
    d.add_argument("--spec", required=True, help="degradation spec JSON")
    d.add_argument("--bits", type=int, choices=(8, 16), default=8)
    d.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = common(sub.add_parser("eval", help="Y-PSNR of a checkpoint on synthesized LR inputs"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--hr-dir", required=True)
    e.add_argument("--spec", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--save-sr", action="store_true", help="also write the SR images")

    g = common(sub.add_parser("gradcheck", help="finite-difference check of every op and loss"), 0)
    g.add_argument("--dtype", choices=("float64", "float32", "both"), default="both")
    g.add_argument("--case", action="append", choices=sorted(gradcheck.CASES))
    g.add_argument("--inject-fault", action="store_true",
                   help=f"corrupt the backward rules of {', '.join(DEFAULT_FAULTS)} (negative control)")
    g.add_argument("--fault", action="append", metavar="OP", help="corrupt this op's backward rule")

    a = common(sub.add_parser("ablate", help="descent-mechanism experiment on free vectors"), 0)
    a.add_argument("--mode", action="append", choices=ablation.MODES)
    a.add_argument("--m", type=int, default=64)
    a.add_argument("--s", type=int, default=16)
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--lr", type=float, default=ablation.AblationConfig.lr)

    k = common(sub.add_parser("kernels", help="dump blur kernels as 16-bit PNG and text"))
    k.add_argument("--spec", required=True)
    k.add_argument("--width", type=int, default=64, help="image width for a kernel field")
    return p


COMMANDS = {"degrade": cmd_degrade, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "kernels": cmd_kernels}


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    manifest = RunManifest(command=args.command, config_path=getattr(args, "config", None)
                           or getattr(args, "spec", None), seed=getattr(args, "seed", None),
                           version=_version(), started=_now(), argv=argv)
    try:
        outputs = COMMANDS[args.command](args)
        manifest.outputs = outputs
        manifest.seed = getattr(args, "seed", None)
        manifest.finished = _now()
        manifest.write(_out_dir(args, args.command))
    except NumericError as exc:
        return _fail("numeric", EXIT_NUMERIC, str(exc))
    except (DataError, ImageError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, str(exc))
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    if getattr(args, "_check_failed", False):
        return _fail("check", EXIT_CHECK, "gradient check reported FAIL rows")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
