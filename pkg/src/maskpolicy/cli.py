"""Command-line entry point: reproducible pretraining, probing, segmentation,
and evaluation runs driven by one JSON config.

Every run writes its fully resolved config into the output directory, logs as
JSONL with sorted keys, and is byte-reproducible from config + seeds. Errors
leave a machine-readable JSON object on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, load_config, write_resolved
from .metrics import evaluate
from .mim import TargetModel, mim_loss_closure
from .nn import AdamConfig, gradcheck, load_params, save_params
from .policy import (Experience, PolicyParams, actor_loss_closure, act,
                     critic_loss_closure, observe_patches)
from .seg import AffinityMap, agglomerate, watershed_fragments
from .trainer import fixed_ratio_pretrain, pretrain, probe_eval, probe_train
from .volume import (LabelVolume, Volume3D, patchify, read_volume, write_volume)


def _write_jsonl(rows, path: Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _mim_adam(cfg) -> AdamConfig:
    return AdamConfig(lr=cfg["schedule"]["lr"])


def _policy_adam(cfg) -> AdamConfig:
    return AdamConfig(lr=cfg["policy"]["lr"])


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_resolved(cfg, out)
    vols = [v for v, _ in cfgmod.train_pool(cfg)]
    result = pretrain(cfgmod.schedule(cfg), vols, cfgmod.mim_config(cfg),
                      cfgmod.loss_config(cfg), cfgmod.policy_config(cfg),
                      mim_adam=_mim_adam(cfg), policy_adam=_policy_adam(cfg),
                      seed=cfg["schedule"]["seed"],
                      policy_init_scale=cfg["policy"]["init_scale"])
    _write_jsonl(result.mim_log, out / "mim.jsonl")
    _write_jsonl(result.policy_log, out / "policy.jsonl")
    _write_jsonl(({"iter": i, "masking_ratio": r}
                  for i, r in zip(result.trajectory.iterations,
                                  result.trajectory.ratios)),
                 out / "ratio.jsonl")
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    save_params(result.model.params(), ckpt / "model.bin")
    save_params(result.policy.params(), ckpt / "policy.bin")
    print(json.dumps({"run": str(out), "iters": len(result.trajectory),
                      "final_loss": result.mim_log[-1]["L_pretrain"]},
                     sort_keys=True))
    return 0


def _one_fixed_ratio(cfg: dict, ratio: float, out: Path) -> dict:
    run = out / f"ratio_{ratio:g}"
    write_resolved(cfg, run)
    vols = [v for v, _ in cfgmod.train_pool(cfg)]
    iters = cfg["schedule"]["phase1_iters"] + cfg["schedule"]["phase2_iters"]
    model, log = fixed_ratio_pretrain(ratio, iters, vols, cfgmod.mim_config(cfg),
                                      cfgmod.loss_config(cfg),
                                      adam=_mim_adam(cfg),
                                      seed=cfg["schedule"]["seed"])
    _write_jsonl(log, run / "mim.jsonl")
    _write_jsonl(({"iter": row["iter"], "masking_ratio": row["masking_ratio"]}
                  for row in log), run / "ratio.jsonl")
    ckpt = run / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    save_params(model.params(), ckpt / "model.bin")
    return {"ratio": ratio, "run": str(run), "final_loss": log[-1]["L_pretrain"]}


def cmd_pretrain_fixed(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ratios = args.ratio
    if args.jobs > 1 and len(ratios) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_one_fixed_ratio, [cfg] * len(ratios), ratios,
                                    [out] * len(ratios)))
    else:
        results = [_one_fixed_ratio(cfg, r, out) for r in ratios]
    print(json.dumps({"runs": results}, sort_keys=True))
    return 0


def _load_model(cfg: dict, path: str) -> TargetModel:
    model = TargetModel(cfgmod.mim_config(cfg), tuple(cfg["data"]["shape"]),
                        np.random.default_rng(0))
    load_params(model.params(), path)
    return model


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_resolved(cfg, out)
    model = _load_model(cfg, args.model)
    train_pairs = cfgmod.train_pool(cfg)
    eval_pairs = cfgmod.eval_pool(cfg)
    head = probe_train(model, train_pairs, cfg["probe"]["iters"],
                       adam=AdamConfig(lr=cfg["probe"]["lr"]),
                       seed=cfg["probe"]["seed"])
    train_mse, _ = probe_eval(model, head, train_pairs)
    eval_mse, maps = probe_eval(model, head, eval_pairs)
    save_params(head.params(), out / "probe_head.bin")
    for i, (aff, (_, labels)) in enumerate(zip(maps, eval_pairs)):
        write_volume(aff.to_volume(), out / f"eval_{i:03d}_affinity.vol",
                     kind="affinity")
        write_volume(labels, out / f"eval_{i:03d}_labels.vol")
    report = {"train_mse": train_mse, "eval_mse": eval_mse,
              "eval_volumes": len(maps)}
    (out / "probe.json").write_text(json.dumps(report, sort_keys=True))
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_segment(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol = read_volume(args.affinity)
    if isinstance(vol, LabelVolume) or vol.channels != 3:
        raise ValueError(f"{args.affinity} is not a 3-channel affinity volume")
    aff = AffinityMap.from_volume(vol)
    seg_cfg = cfg["seg"]
    fragments = watershed_fragments(aff, seg_cfg["seed_threshold"], seg_cfg["bias"])
    seg = agglomerate(fragments, aff, seg_cfg["merge_threshold"],
                      quantile=seg_cfg["quantile"])
    write_volume(seg.labels, out / "segmentation.vol")
    _write_jsonl(({"a": a, "b": b, "score": s} for a, b, s in seg.merge_history),
                 out / "merge_history.jsonl")
    print(json.dumps({"segments": int(seg.labels.ids().size),
                      "merges": len(seg.merge_history),
                      "out": str(out / "segmentation.vol")}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    pred = read_volume(args.pred)
    gt = read_volume(args.gt)
    if not isinstance(pred, LabelVolume) or not isinstance(gt, LabelVolume):
        raise ValueError("evaluate expects two label volumes")
    report = evaluate(pred, gt, log_base=cfg["metrics"]["log_base"],
                      include_background=cfg["metrics"]["include_background"])
    row = report.to_dict()
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["pred", "gt"] + list(row))
            if new:
                writer.writeheader()
            writer.writerow({"pred": args.pred, "gt": args.gt, **row})
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    p = cfg["model"]["patch_size"]
    shape = (p // 2, 2 * p, 2 * p)  # 8 patches: every tensor checked quickly
    rng = np.random.default_rng(cfg["schedule"]["seed"])
    from .volume import gen_phantom
    vol, _ = gen_phantom(cfg["data"]["seed"], shape, 2, cfg["data"]["noise_sigma"],
                         radius_range=(2.0, 3.0))
    patches, grid = patchify(vol, p)
    model = TargetModel(cfgmod.mim_config(cfg), shape, rng)
    hog_t = model.hog_targets(patches)
    mask = np.zeros(grid.num_patches, dtype=bool)
    mask[rng.permutation(grid.num_patches)[:grid.num_patches // 2]] = True
    from .mim import MaskDecision
    decision = MaskDecision(mask)
    loss_cfg = cfgmod.loss_config(cfg)

    reports = {"mim": gradcheck(
        mim_loss_closure(model, patches, hog_t, decision, loss_cfg),
        model.params())}
    policy = PolicyParams(cfgmod.policy_config(cfg), rng, init_scale=0.1)
    state = observe_patches(model, patches)
    d1, _, _ = act(policy, state, rng)
    d2, _, _ = act(policy, state, rng)
    buffer = [Experience(state, d1, 0.31), Experience(state, d2, -0.17)]
    reports["critic"] = gradcheck(critic_loss_closure(policy, buffer),
                                  policy.critic_params())
    reports["actor"] = gradcheck(
        actor_loss_closure(policy, buffer,
                           entropy_coef=cfg["policy"]["entropy_coef"]),
        policy.actor_params())

    worst = max(r.max_rel_error for r in reports.values())
    payload = {name: r.to_dict() for name, r in reports.items()}
    payload["max_rel_error"] = worst
    payload["tolerance"] = args.tolerance
    payload["passed"] = worst < args.tolerance
    print(json.dumps(payload, sort_keys=True))
    return 0 if worst < args.tolerance else 1


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_resolved(cfg, out)
    from .seg import affinity_from_labels
    for tag, pool in (("train", cfgmod.train_pool(cfg)),
                      ("eval", cfgmod.eval_pool(cfg))):
        for i, (vol, labels) in enumerate(pool):
            write_volume(vol, out / f"{tag}_{i:03d}.vol")
            write_volume(labels, out / f"{tag}_{i:03d}_labels.vol")
            if tag == "eval":
                write_volume(affinity_from_labels(labels).to_volume(),
                             out / f"{tag}_{i:03d}_affinity.vol", kind="affinity")
    n = cfg["data"]["train_volumes"] + cfg["data"]["eval_volumes"]
    print(json.dumps({"volumes": n, "out": str(out)}, sort_keys=True))
    return 0


def _ratio_points(run: Path) -> list[tuple[int, float]]:
    path = run / "ratio.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no ratio log at {path}")
    points = []
    for line in path.read_text().splitlines():
        row = json.loads(line)
        points.append((int(row["iter"]), float(row["masking_ratio"])))
    return points


def write_ratio_svg(points: list[tuple[int, float]], path: Path,
                    width: int = 720, height: int = 360) -> None:
    """Dependency-free SVG line chart of the masking-ratio trajectory."""
    pad = 48
    xs = [p[0] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    span = max(x_hi - x_lo, 1)

    def sx(x):
        return pad + (x - x_lo) / span * (width - 2 * pad)

    def sy(y):
        return height - pad - y * (height - 2 * pad)

    poly = " ".join(f"{sx(i):.1f},{sy(r):.1f}" for i, r in points)
    grid_lines = []
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        grid_lines.append(
            f'<line x1="{pad}" y1="{y:.1f}" x2="{width - pad}" y2="{y:.1f}" '
            f'stroke="#ddd"/><text x="6" y="{y + 4:.1f}" font-size="11" '
            f'fill="#555">{frac:.2f}</text>')
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">'
        f'<rect width="100%" height="100%" fill="white"/>'
        + "".join(grid_lines)
        + f'<polyline points="{poly}" fill="none" stroke="#1f77b4" '
        f'stroke-width="1.2"/>'
        f'<text x="{width // 2}" y="{height - 10}" font-size="12" fill="#333" '
        f'text-anchor="middle">iteration</text>'
        f'<text x="{width // 2}" y="16" font-size="13" fill="#111" '
        f'text-anchor="middle">masking ratio</text></svg>')
    path.write_text(svg)


def cmd_ratio_plot(args) -> int:
    run = Path(args.run)
    points = _ratio_points(run)
    svg_path = Path(args.out_svg) if args.out_svg else run / "ratio.svg"
    csv_path = Path(args.out_csv) if args.out_csv else run / "ratio.csv"
    write_ratio_svg(points, svg_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "masking_ratio"])
        writer.writerows(points)
    print(json.dumps({"svg": str(svg_path), "csv": str(csv_path),
                      "points": len(points)}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskpolicy",
        description="Decision-based masked-volume pretraining and the "
                    "affinity-segmentation evaluation stack.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None,
                       help="JSON config with overrides (defaults otherwise)")
        return p

    p = add("pretrain", cmd_pretrain,
            "two-phase pretraining with the learned masking policy")
    p.add_argument("--out", required=True, help="run directory")

    p = add("pretrain-fixed", cmd_pretrain_fixed,
            "masked-autoencoder baseline at fixed masking ratio(s)")
    p.add_argument("--ratio", type=float, action="append", required=True,
                   help="masking ratio in (0,1); repeat for a sweep")
    p.add_argument("--out", required=True, help="parent directory for runs")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel workers for independent sweep points")

    p = add("probe", cmd_probe,
            "train/evaluate the frozen-feature affinity probe")
    p.add_argument("--model", required=True, help="model checkpoint (.bin)")
    p.add_argument("--out", required=True)

    p = add("segment", cmd_segment,
            "watershed + agglomeration over an affinity volume")
    p.add_argument("--affinity", required=True, help="affinity .vol file")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "VOI and adapted Rand error")
    p.add_argument("--pred", required=True, help="predicted labels .vol")
    p.add_argument("--gt", required=True, help="ground-truth labels .vol")
    p.add_argument("--csv", default=None, help="append a CSV row here")

    p = add("gradcheck", cmd_gradcheck,
            "finite-difference verification of every model gradient")
    p.add_argument("--tolerance", type=float, default=1e-6)

    p = add("gen-data", cmd_gen_data, "write phantom volumes and labels")
    p.add_argument("--out", required=True)

    p = add("ratio-plot", cmd_ratio_plot,
            "masking-ratio trajectory as CSV + SVG")
    p.add_argument("--run", required=True, help="run directory with ratio.jsonl")
    p.add_argument("--out-svg", default=None)
    p.add_argument("--out-csv", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "type": "ConfigError",
                          "violations": exc.errors}, sort_keys=True),
              file=sys.stderr)
        return 1
    except Exception as exc:  # CLI boundary: every failure becomes error JSON
        print(json.dumps({"error": str(exc), "type": type(exc).__name__},
                         sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
