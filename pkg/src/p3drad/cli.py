"""Command-line entry point: ``p3drad <subcommand> [flags]``.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 on runtime
failure (including a background-purity violation during ``bench``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .network import TINY, NetworkConfig, P3DUNet, load_checkpoint
from .phantom import PhantomConfig, make_dataset
from .sampler import SamplerConfig, inpaint_volume
from .schedule import make_linear_schedule, schedule_table
from .train import TrainConfig, set_reference_mode, train
from .volumeio import read_manifest, save_volume

log = logging.getLogger("p3drad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}")
    return tuple(int(p) for p in parts)


def _pair(text: str) -> tuple[int, int]:
    lo, hi = (int(p) for p in text.split(","))
    return lo, hi


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p]


def _str_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0, help="base random seed")
    g.add_argument("--reference-mode", action="store_true", help="single-threaded, bit-reproducible execution")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    g.add_argument("--out-dir", type=Path, default=Path("out"), help="directory for all outputs")
    g.add_argument("--jobs", type=int, default=1, help="parallel subjects (forced to 1 in reference mode)")

    parser = _Parser(prog="p3drad", description="Pseudo-3D region-aware diffusion inpainting")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic longitudinal dataset")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--dims", type=_dims, default=(32, 64, 64), help="DxHxW")
    p.add_argument("--atrophy", type=float, default=0.03)
    p.add_argument("--bias", type=float, default=0.05)
    p.add_argument("--lesion-count", type=_pair, default=(8, 14), help="MIN,MAX lesions per timepoint")
    p.add_argument("--lesion-radius", type=_pair, default=(2, 5), help="MIN,MAX radius in voxels")

    p = sub.add_parser("train", parents=[common], help="train the network on a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--gamma", type=float, default=5.0)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--phase-mode", choices=["both", "phase1_only"], default="both")
    p.add_argument("--objective", choices=["rad", "global"], default="rad")
    p.add_argument("--weighting", choices=["v", "eps"], default="v")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--resume", type=Path, default=None)
    _network_flags(p)

    p = sub.add_parser("inpaint", parents=[common], help="inpaint every subject of a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=["rad", "cddpm"], default="rad")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--overlap", type=int, default=8)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--region", choices=["mask", "whole", "both"], default="both")
    p.add_argument("--views", type=_str_list, default=list(metrics.VIEWS), help="comma-separated views")

    p = sub.add_parser("bench", parents=[common], help="time samplers and check background purity")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None, help="omit to bench untrained tiny weights")
    p.add_argument("--modes", type=_str_list, default=["rad", "cddpm"])
    p.add_argument("--steps", type=_int_list, default=[100, 1000])
    p.add_argument("--subjects", type=int, default=1, help="number of manifest subjects to bench")
    p.add_argument("--T", type=int, default=1000)

    p = sub.add_parser("schedule-dump", parents=[common], help="write the noise schedule table as CSV")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--gamma", type=float, default=5.0)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--weighting", choices=["v", "eps"], default="v")
    return parser


def _network_flags(p):
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--blocks-per-level", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--precision", choices=["single", "double"], default="single")
    p.add_argument("--norm", choices=["group", "none"], default="group")


def _resolved(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}


def _setup_logging(args) -> None:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_p3drad", False):
            root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    for handler in (logging.StreamHandler(sys.stderr), logging.FileHandler(args.out_dir / "run.log")):
        handler.setFormatter(fmt)
        handler._p3drad = True
        root.addHandler(handler)
    root.setLevel(args.log_level)


def cmd_phantom(args) -> dict:
    cfg = PhantomConfig(
        dims=args.dims,
        seed=args.seed,
        atrophy_factor=args.atrophy,
        bias_amplitude=args.bias,
        lesion_count_range=args.lesion_count,
        lesion_radius_range=args.lesion_radius,
    )
    path = make_dataset(args.subjects, cfg, args.out_dir)
    return {"manifest": str(path)}


def cmd_train(args) -> dict:
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        max_steps=args.max_steps,
        batch_size=args.batch_size,
        window=args.window,
        gamma=args.gamma,
        T=args.T,
        beta_start=args.beta_start,
        beta_end=args.beta_end,
        phase_mode=args.phase_mode,
        objective=args.objective,
        weighting=args.weighting,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        reference_mode=args.reference_mode,
    )
    net = NetworkConfig(
        base_channels=args.base_channels,
        levels=args.levels,
        blocks_per_level=args.blocks_per_level,
        embed_dim=args.embed_dim,
        precision=args.precision,
        norm=args.norm,
        max_timestep=args.T,
    )
    path = train(args.manifest, cfg, args.out_dir, net, resume=args.resume)
    return {"checkpoint": str(path)}


def cmd_inpaint(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    man = read_manifest(args.manifest)
    cfg = SamplerConfig(mode=args.mode, steps=args.steps, eta=args.eta, seed=args.seed)

    def run(i):
        sample = man.load_sample(i)
        res = inpaint_volume(model, sample, cfg, window=args.window, overlap=args.overlap)
        sub = args.out_dir / sample.subject_id
        sub.mkdir(parents=True, exist_ok=True)
        save_volume(res.inp_t1, sub / "inp_t1.vol")
        save_volume(res.inp_t2, sub / "inp_t2.vol")
        (sub / "stats.json").write_text(json.dumps(res.stats, sort_keys=True) + "\n")
        log.info("%s %s", sample.subject_id, json.dumps(res.stats, sort_keys=True))
        return res.stats

    jobs = 1 if args.reference_mode else max(1, args.jobs)
    if jobs == 1:
        stats = [run(i) for i in range(len(man))]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as pool:
            stats = list(pool.map(run, range(len(man))))
    return {"subjects": len(stats), "nfe": sum(s["nfe"] for s in stats)}


def cmd_eval(args) -> dict:
    unknown = set(args.views) - set(metrics.VIEWS)
    if unknown:
        raise ValueError(f"unknown views {sorted(unknown)}")
    report = metrics.evaluate(args.manifest, args.predictions)
    drop = set()
    if args.region == "mask":
        drop |= {"nrmse_whole", "psnr_whole", "ssim_whole"}
    elif args.region == "whole":
        drop |= {"nrmse", "psnr", "ssim"}
    drop |= {f"pproxy_{v}" for v in metrics.VIEWS if v not in args.views}
    for row in report.rows:
        for key in drop:
            row.pop(key, None)
    report.aggregate = {k: v for k, v in report.aggregate.items() if k not in drop}
    csv_path, json_path = metrics.write_report(report, args.out_dir)
    return {"csv": str(csv_path), "json": str(json_path), "pearson_r": report.pearson_r}


def _background_pure(sample, res) -> bool:
    ok = True
    for img, m, inp in ((sample.img_t1, sample.lesion_mask_t1, res.inp_t1), (sample.img_t2, sample.lesion_mask_t2, res.inp_t2)):
        bg = m.data == 0
        ok &= bool(np.array_equal(inp.data[bg].view(np.uint32), img.data[bg].view(np.uint32)))
    return ok


def bench(manifest, model, modes, step_budgets, n_subjects: int = 1, seed: int = 0) -> dict:
    """Run every valid mode x budget on the first ``n_subjects`` subjects."""
    man = read_manifest(manifest)
    T = model.config.max_timestep
    runs = []
    for i in range(min(n_subjects, len(man))):
        sample = man.load_sample(i)
        for mode in modes:
            for steps in step_budgets:
                limit = T // 2 if mode == "rad" else T
                entry = {"subject_id": sample.subject_id, "mode": mode, "steps": steps}
                if steps > limit:
                    entry["skipped"] = f"{mode} allows at most {limit} steps"
                    runs.append(entry)
                    continue
                res = inpaint_volume(model, sample, SamplerConfig(mode=mode, steps=steps, seed=seed), window=sample.dims[0])
                entry.update({"nfe": res.stats["nfe"], "seconds": res.stats["seconds"],
                              "voxels_inpainted": res.stats["voxels_inpainted"]})
                if mode == "rad":
                    entry["background_pure"] = _background_pure(sample, res)
                runs.append(entry)
    done = [r for r in runs if "nfe" in r]
    totals = {}
    for r in done:
        t = totals.setdefault((r["mode"], r["steps"]), {"nfe": 0, "seconds": 0.0})
        t["nfe"] += r["nfe"]
        t["seconds"] += r["seconds"]
    ratios = []
    for (m1, s1), a in totals.items():
        for (m2, s2), b in totals.items():
            if m1 == "cddpm" and m2 == "rad" and b["nfe"] > 0:
                ratios.append({"cddpm_steps": s1, "rad_steps": s2, "nfe_ratio": a["nfe"] / b["nfe"],
                               "seconds_ratio": a["seconds"] / b["seconds"] if b["seconds"] > 0 else None})
    purity = all(r.get("background_pure", True) for r in done)
    return {"runs": runs, "ratios": ratios, "background_purity": purity}


def cmd_bench(args) -> dict:
    man = read_manifest(args.manifest)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = P3DUNet(NetworkConfig(**{**TINY.to_dict(), "max_timestep": args.T}), seed=args.seed)
    unknown = set(args.modes) - {"rad", "cddpm"}
    if unknown:
        raise ValueError(f"unknown modes {sorted(unknown)}")
    if len(man) == 0:
        raise ValueError("manifest has no subjects")
    result = bench(args.manifest, model, args.modes, args.steps, args.subjects, args.seed)
    path = args.out_dir / "bench.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if not result["background_purity"]:
        raise RuntimeError("background purity violated during rad sampling")
    return {"bench": str(path), "ratios": result["ratios"]}


def cmd_schedule_dump(args) -> dict:
    s = make_linear_schedule(args.T, args.beta_start, args.beta_end)
    rows = schedule_table(s, args.gamma, args.weighting)
    path = args.out_dir / "schedule.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return {"csv": str(path), "rows": len(rows)}


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "schedule-dump": cmd_schedule_dump,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"p3drad: error: {exc}", file=sys.stderr)
        return 1
    _setup_logging(args)
    log.info("config %s", json.dumps(_resolved(args), sort_keys=True))
    set_reference_mode(args.reference_mode)
    try:
        result = COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, UsageError) as exc:
        log.error("%s: %s", args.command, exc)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.error("%s failed: %s", args.command, exc)
        return 2
    log.info("result %s", json.dumps(result, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
