"""Command-line entry point wiring the library into reproducible experiments.

Subcommands: gen-data, add-noise, train, denoise, eval, rank-report,
spectrum-report, count-params, ablation. Every emitted artifact embeds the
arguments that produced it (checkpoint config block, ``# key=value`` comment
lines in CSVs, a JSON manifest next to generated data), so re-running a
command with the recorded arguments reproduces the outputs bit-exactly at
one BLAS thread.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataio, kernel_analysis, metrics, network, noise
from .errors import FormatError


def _config_lines(args: argparse.Namespace) -> list[str]:
    skip = {"func"}
    items = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return [f"# {k}={v}" for k, v in items.items()]


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"dims must look like 31x64x64, got {text!r}")
    return tuple(int(p) for p in parts)


def _load_cubes(directory: str) -> list[np.ndarray]:
    paths = sorted(Path(directory).glob("*.hsc"))
    if not paths:
        raise FileNotFoundError(f"no .hsc files in {directory}")
    return [dataio.read_hsc(p) for p in paths]


def _write_csv(out, header: str, rows, comment_lines) -> None:
    lines = list(comment_lines) + [header] + [",".join(str(v) for v in r) for r in rows]
    text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    b, h, w = args.dims
    names = []
    for i in range(args.count):
        spec = dataio.PhantomSpec(bands=b, height=h, width=w, seed=args.seed + i)
        cube = dataio.generate_phantom(spec)
        name = f"phantom_{i:03d}.hsc"
        dataio.write_hsc(out / name, cube)
        names.append(name)
    manifest = {k: v for k, v in vars(args).items() if k != "func"}
    manifest["files"] = names
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} cubes of {b}x{h}x{w} to {out}")
    return 0


def cmd_add_noise(args) -> int:
    cube = dataio.read_hsc(args.infile)
    spec = noise.spec_from_token(args.case, seed=args.seed, cube_id=args.cube_id)
    dataio.write_hsc(args.outfile, noise.corrupt(cube, spec))
    print(f"wrote {args.outfile} ({args.case}, seed {args.seed})")
    return 0


def cmd_train(args) -> int:
    cubes = _load_cubes(args.data)
    cfg = network.UNetConfig(
        levels=args.levels,
        base_channels=args.base_channels,
        scheme=args.extractor,
        blocks_per_level=args.blocks_per_level,
        k=args.k,
    )
    train_cfg = network.TrainConfig(
        lr0=args.lr0, epochs=args.epochs, batch=args.batch, seed=args.seed
    )
    model = network.DenoisingUNet(cfg, seed=args.seed)
    spec = noise.spec_from_token(args.noise, seed=args.seed)
    extra = {k: v for k, v in vars(args).items() if k != "func"}
    log = network.train(
        model, cubes, train_cfg, noise_spec=spec, out_dir=args.out, extra_config=extra
    )
    rows = [(e, f"{v:.6f}") for e, v in enumerate(log)]
    _write_csv(Path(args.out) / "loss_log.csv", "epoch,l1_loss", rows, _config_lines(args))
    print(f"trained {args.extractor} for {args.epochs} epochs; final loss {log[-1]:.6f}")
    return 0


def cmd_denoise(args) -> int:
    model, _ = network.model_from_checkpoint(args.checkpoint)
    cube = dataio.read_hsc(args.infile)
    dataio.write_hsc(args.outfile, model.denoise(cube))
    print(f"wrote {args.outfile}")
    return 0


def cmd_eval(args) -> int:
    ref = dataio.read_hsc(args.ref)
    test = dataio.read_hsc(args.test)
    report = metrics.quality_report(ref, test)
    rows = [
        ("mpsnr", f"{report.mpsnr:.4f}"),
        ("mssim", f"{report.mssim:.6f}"),
        ("sam", f"{report.sam:.6f}"),
        ("sam_skipped", report.sam_skipped),
    ]
    rows += [(f"band{i}_psnr", f"{v:.4f}") for i, v in enumerate(report.per_band_psnr)]
    _write_csv(args.out, "metric,value", rows, _config_lines(args))
    print(
        f"mpsnr={report.mpsnr:.2f} dB  mssim={report.mssim:.4f}  sam={report.sam:.4f} rad"
    )
    return 0


def cmd_rank_report(args) -> int:
    schemes = kernel_analysis.SCHEMES if args.all else (args.scheme,)
    rows = []
    for scheme in schemes:
        for draw in range(args.seeds):
            rng = np.random.default_rng((args.seed, draw))
            kernels = kernel_analysis.random_scheme_kernels(
                scheme, args.M, args.C, args.k, rng
            )
            ukm = kernel_analysis.build_kernel_matrix(
                scheme, kernels, args.M, args.C, args.k
            )
            rep = kernel_analysis.measure_rank(ukm, rel_tol=args.tol)
            rows.append(
                (
                    scheme,
                    args.M,
                    args.C,
                    args.k,
                    rep.predicted_upper_bound,
                    rep.measured_rank,
                    f"{rep.stable_rank:.4f}",
                )
            )
    _write_csv(
        args.out,
        "scheme,M,C,k,predicted_bound,measured_rank,stable_rank",
        rows,
        _config_lines(args),
    )
    return 0


def cmd_spectrum_report(args) -> int:
    schemes = kernel_analysis.SCHEMES if args.all else (args.scheme,)
    b, h, w = args.dims
    rows = []
    for scheme in schemes:
        rng = np.random.default_rng(args.seed)
        kernels = kernel_analysis.random_scheme_kernels(scheme, args.M, args.C, args.k, rng)
        x = np.random.default_rng(args.seed + 1).standard_normal((args.C, b, h, w))
        sigmas = kernel_analysis.feature_spectrum(scheme, kernels, x)
        rows += [(scheme, i, f"{s:.6e}") for i, s in enumerate(sigmas)]
    _write_csv(args.out, "scheme,index,normalized_sigma", rows, _config_lines(args))
    return 0


def cmd_count_params(args) -> int:
    schemes = kernel_analysis.SCHEMES if args.extractor == "all" else (args.extractor,)
    m = args.M if args.M is not None else args.channels
    c = args.C if args.C is not None else args.channels
    for scheme in schemes:
        weights = kernel_analysis.count_params(scheme, m, c, args.k, not args.no_compression)
        biases = kernel_analysis.count_biases(scheme, m, not args.no_compression)
        print(
            f"scheme={scheme} M={m} C={c} k={args.k} "
            f"weights={weights} biases={biases} total={weights + biases}"
        )
    return 0


def cmd_ablation(args) -> int:
    cubes = _load_cubes(args.data)
    eval_clean = _load_cubes(args.eval_data)
    eval_noisy = [
        noise.corrupt(c, noise.spec_from_token(args.noise, seed=args.eval_seed, cube_id=i))
        for i, c in enumerate(eval_clean)
    ]
    rows = []
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for scheme in kernel_analysis.SCHEMES:
        cfg = network.UNetConfig(
            levels=args.levels,
            base_channels=args.base_channels,
            scheme=scheme,
            blocks_per_level=args.blocks_per_level,
            k=args.k,
        )
        train_cfg = network.TrainConfig(epochs=args.epochs, batch=args.batch, seed=args.seed)
        model = network.DenoisingUNet(cfg, seed=args.seed)
        spec = noise.spec_from_token(args.noise, seed=args.seed)
        network.train(
            model, cubes, train_cfg, noise_spec=spec, out_dir=out_dir / scheme,
            extra_config={"ablation_scheme": scheme},
        )
        scores = [
            metrics.quality_report(clean, model.denoise(noisy))
            for clean, noisy in zip(eval_clean, eval_noisy)
        ]
        rows.append(
            (
                scheme,
                model.param_count(),
                f"{np.mean([s.mpsnr for s in scores]):.4f}",
                f"{np.mean([s.mssim for s in scores]):.6f}",
                f"{np.mean([s.sam for s in scores]):.6f}",
            )
        )
        print(f"{scheme}: mpsnr {rows[-1][2]} dB")
    _write_csv(
        out_dir / "ablation.csv",
        "scheme,params,mpsnr,mssim,sam",
        rows,
        _config_lines(args),
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_arch_flags(p):
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-channels", type=int, dest="base_channels", default=16)
    p.add_argument("--blocks-per-level", type=int, dest="blocks_per_level", default=2)
    p.add_argument("--k", type=int, default=3)


def _add_model_flags(p):
    p.add_argument("--extractor", default="reconvset", choices=kernel_analysis.SCHEMES)
    _add_arch_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsdenoise",
        description="Hyperspectral cube denoising and kernel-matrix rank analysis",
    )
    parser.add_argument(
        "--threads", type=int, default=1, help="BLAS thread count (1 = deterministic)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic phantom cubes")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", type=_parse_dims, default=(31, 256, 256))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("add-noise", help="corrupt a cube file")
    p.add_argument("--case", required=True, help="g<sigma>|blind|c1..c5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cube-id", type=int, dest="cube_id", default=0)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("train", help="train a denoiser on a directory of cubes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr0", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", default="blind")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="apply a trained checkpoint to a cube")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="quality metrics between two cube files")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank-report", help="measured vs predicted kernel-matrix ranks")
    p.add_argument("--all", action="store_true")
    p.add_argument("--scheme", default="reconvset", choices=kernel_analysis.SCHEMES)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--C", type=int, default=16)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rank_report)

    p = sub.add_parser("spectrum-report", help="normalized feature singular values")
    p.add_argument("--all", action="store_true")
    p.add_argument("--scheme", default="reconvset", choices=kernel_analysis.SCHEMES)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--C", type=int, default=16)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_parse_dims, default=(12, 16, 16))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_spectrum_report)

    p = sub.add_parser("count-params", help="closed-form block parameter counts")
    p.add_argument("--extractor", default="all", choices=kernel_analysis.SCHEMES + ("all",))
    p.add_argument("--channels", type=int, default=16, help="sets M = C")
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--C", type=int, default=None)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--no-compression", action="store_true", dest="no_compression")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("ablation", help="train all five schemes on identical data")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-seed", type=int, dest="eval_seed", default=12345)
    p.add_argument("--noise", default="blind")
    _add_arch_flags(p)
    p.set_defaults(func=cmd_ablation)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
