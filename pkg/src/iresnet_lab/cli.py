"""Command-line frontend: data generation, training, reconstruction, studies.

Every command is deterministic given its flags (all randomness is seeded),
writes its outputs plus a ``manifest.txt`` of resolved options into the run
directory, and renders matplotlib figures next to each CSV it emits.  Flag
values override entries of an optional ``key=value`` config file, which in
turn override the built-in defaults.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import plots
from .analysis import (
    ConvergencePairing,
    DirectionProbeConfig,
    approx_quality,
    direction_ascent,
    inversion_error_study,
    local_approx_check,
)
from .data import (
    export_raw,
    import_raw,
    load_checkpoint,
    make_pairs,
    read_manifest,
    read_pgm,
    save_checkpoint,
    synth_dataset,
    write_csv,
    write_manifest,
    write_pgm,
)
from .grid import psnr, ssim
from .network import FixedPointConfig, lift, net_invert, new_model, unlift
from .operators import GaussianBlurOp, PeronaMalikOp
from .saliency import (
    canny_edges,
    choose_k,
    cluster_summary,
    jacobian_patch,
    manual_clusters,
    normalize_signed,
    sample_pixels,
    spectral_cluster,
)
from .training import TrainConfig, train

# option tables: (name, type, default, help); None defaults mean
# "resolved later" (e.g. from checkpoint metadata)
_SYNTH_OPTS = [
    ("n", int, 608, "total number of images"),
    ("size", int, 32, "square image size in pixels (>= 16)"),
    ("seed", int, 7, "generator seed"),
    ("train", int, 512, "training split size"),
    ("val", int, 32, "validation split size"),
    ("test", int, 64, "test split size"),
]

_TRAIN_OPTS = [
    ("operator", str, "blur", "forward operator: blur | pm"),
    ("objective", str, "reconstruction", "reconstruction | approximation"),
    ("delta", float, 0.05, "noise standard deviation"),
    ("L", float, 0.999, "Lipschitz parameter of the inverse"),
    ("N", int, 6, "number of subnetworks"),
    ("M", int, 8, "lifted channel count"),
    ("hidden", int, 16, "hidden channels per residual"),
    ("kernel_size", int, 5, "first-stage convolution size"),
    ("epochs", int, 10, "training epochs"),
    ("batch_size", int, 16, "mini-batch size"),
    ("lr", float, 1e-3, "Adam learning rate"),
    ("fp_tol", float, 1e-5, "fixed-point tolerance during training"),
    ("fp_max_iter", int, 400, "fixed-point iteration budget"),
    ("seed", int, 0, "master seed (init, shuffling, noise)"),
    ("checkpoint_every", int, 0, "epochs between intermediate checkpoints"),
    ("blur_size", int, 11, "blur kernel size"),
    ("blur_sigma", float, 5.0 / 3.0, "blur kernel standard deviation"),
    ("pm_lambda", float, 0.1, "diffusion contrast parameter"),
    ("pm_step", float, 0.15, "diffusion integrator step size"),
    ("pm_steps", int, 5, "diffusion integrator steps"),
]

_RECON_OPTS = [
    ("split", str, "test", "dataset split to reconstruct: train | val | test"),
    ("operator", str, None, "override operator (default: checkpoint metadata)"),
    ("delta", float, None, "override noise level (default: checkpoint metadata)"),
    ("seed", int, 0, "noise seed"),
    ("limit", int, 0, "max images (0 = all)"),
    ("fp_tol", float, 1e-8, "fixed-point tolerance"),
    ("fp_max_iter", int, 400, "fixed-point iteration budget"),
    ("blur_size", int, 11, "blur kernel size"),
    ("blur_sigma", float, 5.0 / 3.0, "blur kernel standard deviation"),
    ("pm_lambda", float, 0.1, "diffusion contrast parameter"),
    ("pm_step", float, 0.15, "diffusion integrator step size"),
    ("pm_steps", int, 5, "diffusion integrator steps"),
]

_STUDY_OPTS = [
    ("split", str, "test", "dataset split the study runs on"),
    ("operator", str, None, "override operator (default: checkpoint metadata)"),
    ("seed", int, 0, "study seed (sampling, clustering, probes)"),
    ("limit", int, 0, "max test images (0 = all)"),
    ("fp_tol", float, 1e-8, "fixed-point tolerance"),
    ("fp_max_iter", int, 400, "fixed-point iteration budget"),
    ("steps", int, 200, "gradient-ascent steps (direction study)"),
    ("rate", float, 0.1, "gradient-ascent rate (direction study)"),
    ("fd_step", float, 1e-3, "finite-difference step for the true operator"),
    ("image_index", int, 0, "test image used by direction/saliency studies"),
    ("mask_pgm", str, None, "binary PGM restricting the ascent direction"),
    ("mode", str, "both", "saliency clustering: spectral | manual | both"),
    ("pixels", int, 300, "sampled pixels for spectral clustering"),
    ("k", int, 2, "cluster count for spectral clustering"),
    ("kmax", int, 6, "largest k for the cluster-count statistics"),
    ("manual_samples", int, 250, "pixels per manual cluster"),
    ("blur_size", int, 11, "blur kernel size"),
    ("blur_sigma", float, 5.0 / 3.0, "blur kernel standard deviation"),
    ("pm_lambda", float, 0.1, "diffusion contrast parameter"),
    ("pm_step", float, 0.15, "diffusion integrator step size"),
    ("pm_steps", int, 5, "diffusion integrator steps"),
]


def _add_options(parser, opts):
    for name, typ, _default, help_text in opts:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ,
                            default=None, help=help_text)


def _resolve(args, opts):
    """flag > config file > default, collected into a plain dict."""
    file_cfg = {}
    if args.config:
        raw = read_manifest(args.config)
        file_cfg = {k.replace("-", "_"): v for k, v in raw.items()}
    out = {}
    for name, typ, default, _help in opts:
        given = getattr(args, name)
        if given is not None:
            out[name] = given
        elif name in file_cfg:
            out[name] = typ(file_cfg[name])
        else:
            out[name] = default
    return out


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_run_manifest(out_dir, command, cfg, extra=None):
    entries = {"command": command}
    entries.update({k: v for k, v in sorted(cfg.items())})
    entries.update(extra or {})
    write_manifest(os.path.join(out_dir, "manifest.txt"), entries)


def _make_operator(name, cfg):
    if name == "blur":
        return GaussianBlurOp(kernel_size=cfg["blur_size"], sigma=cfg["blur_sigma"])
    if name == "pm":
        return PeronaMalikOp(lam=cfg["pm_lambda"], step_size=cfg["pm_step"],
                             steps=cfg["pm_steps"])
    raise ValueError(f"unknown operator {name!r} (expected blur or pm)")


def _load_dataset(data_dir):
    manifest = read_manifest(os.path.join(data_dir, "manifest.txt"))
    ds = import_raw(
        os.path.join(data_dir, "images.raw"),
        width=int(manifest["width"]),
        height=int(manifest["height"]),
        channels=int(manifest.get("channels", "1")),
    )
    splits = (int(manifest["train"]), int(manifest["val"]), int(manifest["test"]))
    ds.splits = splits
    return ds


def _split_images(ds, split):
    images = {"train": ds.train_images, "val": ds.val_images, "test": ds.test_images}[split]
    return list(images)


def cmd_synth_data(args):
    cfg = _resolve(args, _SYNTH_OPTS)
    if cfg["train"] + cfg["val"] + cfg["test"] != cfg["n"]:
        raise ValueError(
            f"splits {cfg['train']}/{cfg['val']}/{cfg['test']} do not sum to n={cfg['n']}"
        )
    ds = synth_dataset(cfg["n"], cfg["size"], cfg["seed"],
                       splits=(cfg["train"], cfg["val"], cfg["test"]))
    out = _ensure_dir(args.out)
    export_raw(os.path.join(out, "images.raw"), ds.images)
    _write_run_manifest(out, "synth-data", cfg, {
        "count": cfg["n"], "height": cfg["size"], "width": cfg["size"],
        "channels": 1, "provenance": "synthetic",
    })
    print(f"wrote {cfg['n']} images to {out}")
    return 0


def cmd_train(args):
    cfg = _resolve(args, _TRAIN_OPTS)
    out = _ensure_dir(args.out)
    ds = _load_dataset(args.data)
    op = _make_operator(cfg["operator"], cfg)
    train_pairs = make_pairs(op, ds.train_images, cfg["delta"], seed=cfg["seed"])
    val_pairs = make_pairs(op, ds.val_images, cfg["delta"], seed=cfg["seed"] + 1)
    h, w = ds.shape
    model = new_model(cfg["N"], cfg["M"], cfg["hidden"], h, w, cfg["L"],
                      seed=cfg["seed"], kernel_size=cfg["kernel_size"])
    tc = TrainConfig(
        objective=cfg["objective"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        lr=cfg["lr"], fp=FixedPointConfig(cfg["fp_tol"], cfg["fp_max_iter"]),
        seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
    )
    metadata = {
        "operator": cfg["operator"], "delta": cfg["delta"],
        "objective": cfg["objective"], "seed": cfg["seed"],
    }

    def hook(epoch, m, adam):
        save_checkpoint(m, adam, os.path.join(out, f"checkpoint_epoch{epoch:04d}.irn"),
                        metadata={**metadata, "epoch": epoch})

    model, adam, metrics = train(model, train_pairs, val_pairs, tc, checkpoint_hook=hook)
    save_checkpoint(model, adam, os.path.join(out, "checkpoint.irn"),
                    metadata={**metadata, "epoch": cfg["epochs"]})
    write_csv(os.path.join(out, "metrics.csv"),
              ["epoch", "train_loss", "val_psnr", "val_ssim"], metrics)
    if metrics:
        plots.save_metrics_curves(os.path.join(out, "metrics.png"), metrics)
    _write_run_manifest(out, "train", cfg, {"data": args.data})
    if metrics:
        print(f"final val PSNR {metrics[-1]['val_psnr']:.2f} dB; checkpoint in {out}")
    else:
        print(f"no epochs run; initialization checkpoint in {out}")
    return 0


def _checkpoint_operator(cfg, metadata):
    name = cfg.get("operator") or metadata.get("operator")
    if name is None:
        raise ValueError("operator not in checkpoint metadata; pass --operator")
    return name, _make_operator(name, cfg)


def cmd_reconstruct(args):
    cfg = _resolve(args, _RECON_OPTS)
    out = _ensure_dir(args.out)
    model, _, metadata = load_checkpoint(args.checkpoint)
    fp = FixedPointConfig(cfg["fp_tol"], cfg["fp_max_iter"])

    if args.input_raw:
        if not (args.width and args.height):
            raise ValueError("--input-raw needs --width and --height")
        observed = list(import_raw(args.input_raw, args.width, args.height, 1).images)
        clean = None
    else:
        if not args.data:
            raise ValueError("pass either --data or --input-raw")
        op_name, op = _checkpoint_operator(cfg, metadata)
        delta = cfg["delta"] if cfg["delta"] is not None else float(metadata.get("delta", 0.0))
        ds = _load_dataset(args.data)
        images = _split_images(ds, cfg["split"])
        pairs = make_pairs(op, images, delta, seed=cfg["seed"]).pairs
        clean = [x for x, _ in pairs]
        observed = [z for _, z in pairs]
    if cfg["limit"]:
        observed = observed[: cfg["limit"]]
        clean = clean[: cfg["limit"]] if clean is not None else None

    if observed and observed[0].shape != (model.height, model.width):
        raise ValueError(
            f"input shape {observed[0].shape} does not match checkpoint "
            f"({model.height}, {model.width})"
        )
    rows = []
    recons = []
    for i, z in enumerate(observed):
        rec = unlift(net_invert(model, lift(z, model.channels), fp))
        recons.append(rec)
        write_pgm(os.path.join(out, f"recon_{i:04d}.pgm"), rec)
        if clean is not None:
            rows.append({
                "index": i,
                "psnr": psnr(rec, clean[i]),
                "ssim": ssim(rec, clean[i]),
                "psnr_observed": psnr(observed[i], clean[i]),
            })
    if rows:
        write_csv(os.path.join(out, "metrics.csv"),
                  ["index", "psnr", "ssim", "psnr_observed"], rows)
    triples = [
        (clean[i] if clean is not None else None, observed[i], recons[i])
        for i in range(min(4, len(recons)))
    ]
    plots.save_reconstruction_grid(os.path.join(out, "reconstructions.png"), triples)
    _write_run_manifest(out, "reconstruct", cfg, {
        "checkpoint": args.checkpoint, "n_images": len(recons),
    })
    print(f"wrote {len(recons)} reconstructions to {out}")
    return 0


def _load_checkpoints(paths):
    loaded = []
    for path in paths:
        model, _, metadata = load_checkpoint(path)
        loaded.append((path, model, metadata))
    return loaded


def cmd_study(args):
    cfg = _resolve(args, _STUDY_OPTS)
    out = _ensure_dir(args.out)
    checkpoints = _load_checkpoints(args.checkpoints.split(","))
    ds = _load_dataset(args.data)
    images = _split_images(ds, cfg["split"])
    if cfg["limit"]:
        images = images[: cfg["limit"]]
    fp = FixedPointConfig(cfg["fp_tol"], cfg["fp_max_iter"])
    op_name, op = _checkpoint_operator(cfg, checkpoints[0][2])
    extra = {"checkpoints": args.checkpoints, "operator": op_name, "n_images": len(images)}

    if args.kind == "inversion":
        entries = [
            (float(meta.get("delta", "nan")), model.lip_param, model)
            for _, model, meta in checkpoints
        ]
        rows = inversion_error_study(ConvergencePairing(entries), op, images, fp)
        write_csv(os.path.join(out, "inversion_error.csv"),
                  ["delta", "L", "mean_error", "std_error", "n"], rows)
        plots.save_inversion_error(os.path.join(out, "inversion_error.png"), rows)
    elif args.kind == "local-approx":
        rows = []
        for _, model, meta in checkpoints:
            rows += local_approx_check(model, op, images, delta=float(meta.get("delta", "nan")))
        write_csv(os.path.join(out, "local_approx.csv"),
                  ["sample", "delta", "L", "error", "one_minus_L", "ratio"], rows)
        plots.save_local_approx(os.path.join(out, "local_approx.png"), rows)
    elif args.kind == "approx-quality":
        rows = []
        for _, model, meta in checkpoints:
            mean_psnr, mean_ssim = approx_quality(model, op, images)
            rows.append({
                "delta": float(meta.get("delta", "nan")), "L": model.lip_param,
                "mean_psnr": mean_psnr, "mean_ssim": mean_ssim, "n": len(images),
            })
        rows.sort(key=lambda r: r["delta"])
        write_csv(os.path.join(out, "approx_quality.csv"),
                  ["delta", "L", "mean_psnr", "mean_ssim", "n"], rows)
        plots.save_approx_quality(os.path.join(out, "approx_quality.png"), rows)
    elif args.kind == "direction":
        _, model, _ = checkpoints[0]
        x0 = images[cfg["image_index"]]
        mask = None
        if cfg["mask_pgm"]:
            mask = (read_pgm(cfg["mask_pgm"]) > 0.5).astype(float)
        probe = DirectionProbeConfig(
            steps=cfg["steps"], rate=cfg["rate"], mask=mask,
            seed=cfg["seed"], fd_step=cfg["fd_step"],
        )
        h, trace = direction_ascent(model, op, x0, probe)
        write_csv(os.path.join(out, "direction_trace.csv"),
                  ["step", "objective", "norm_phi", "norm_F"], trace)
        span = h.max() - h.min()
        write_pgm(os.path.join(out, "direction_h.pgm"),
                  (h - h.min()) / (span if span > 0 else 1.0))
        plots.save_direction(os.path.join(out, "direction.png"), trace, h, x0)
    elif args.kind == "saliency":
        _, model, _ = checkpoints[0]
        _run_saliency(out, model, op, images[cfg["image_index"]], cfg)
    else:
        raise ValueError(f"unknown study kind {args.kind!r}")
    _write_run_manifest(out, f"study:{args.kind}", cfg, extra)
    print(f"study outputs in {out}")
    return 0


def _run_saliency(out, model, op, x0, cfg):
    weak, strong = canny_edges(x0)
    edge_mask = weak | strong
    write_pgm(os.path.join(out, "edges_weak.pgm"), weak)
    write_pgm(os.path.join(out, "edges_strong.pgm"), strong)
    targets = [("network", model), ("operator", op)]

    if cfg["mode"] in ("spectral", "both"):
        px = sample_pixels(x0.shape, cfg["pixels"], cfg["seed"])
        assign_rows = []
        k_rows = []
        cluster_rows = []
        for name, target in targets:
            patches = [normalize_signed(jacobian_patch(target, x0, p)) for p in px]
            curves = choose_k(patches, cfg["kmax"], seed=cfg["seed"])
            labels = spectral_cluster(patches, cfg["k"], seed=cfg["seed"])
            report = cluster_summary(patches, labels, edge_mask)
            for (r, c), lab in zip(px, labels):
                assign_rows.append({"target": name, "row": r, "col": c, "cluster": int(lab)})
            for cid in range(report.k):
                cluster_rows.append({
                    "target": name, "cluster": cid,
                    "size": int(np.sum(report.assignments == cid)),
                    "edge_percent": report.edge_percent[cid],
                    "is_edge_cluster": int(cid == report.edge_cluster),
                })
                np.savetxt(
                    os.path.join(out, f"mean_patch_{name}_c{cid}.csv"),
                    report.mean_patches[cid], delimiter=",",
                )
            for i, k in enumerate(range(1, cfg["kmax"] + 1)):
                k_rows.append({
                    "target": name, "k": k, "dispersion": curves.w[i],
                    "gap": curves.gap[i], "gap_star": curves.gap_star[i],
                    "sd": curves.sd[i], "recommended_k": curves.recommended_k,
                })
            plots.save_cluster_map(
                os.path.join(out, f"clusters_{name}.png"), x0, px, labels,
                title=f"{name} saliency clusters",
            )
            plots.save_mean_patches(os.path.join(out, f"mean_patches_{name}.png"), report)
            plots.save_choose_k(os.path.join(out, f"choose_k_{name}.png"), curves)
        write_csv(os.path.join(out, "assignments.csv"),
                  ["target", "row", "col", "cluster"], assign_rows)
        write_csv(os.path.join(out, "clusters.csv"),
                  ["target", "cluster", "size", "edge_percent", "is_edge_cluster"],
                  cluster_rows)
        write_csv(os.path.join(out, "choose_k.csv"),
                  ["target", "k", "dispersion", "gap", "gap_star", "sd", "recommended_k"],
                  k_rows)

    if cfg["mode"] in ("manual", "both"):
        smooth_px, edge_px = manual_clusters(x0, samples=cfg["manual_samples"])
        px = smooth_px + edge_px
        labels = [0] * len(smooth_px) + [1] * len(edge_px)
        write_csv(
            os.path.join(out, "manual_assignments.csv"),
            ["row", "col", "cluster"],
            [{"row": r, "col": c, "cluster": lab} for (r, c), lab in zip(px, labels)],
        )
        for name, target in targets:
            patches = [normalize_signed(jacobian_patch(target, x0, p)) for p in px]
            report = cluster_summary(patches, labels, edge_mask, method="manual")
            for cid, tag in ((0, "smooth"), (1, "edge")):
                np.savetxt(
                    os.path.join(out, f"manual_mean_{name}_{tag}.csv"),
                    report.mean_patches[cid], delimiter=",",
                )
            plots.save_mean_patches(os.path.join(out, f"manual_means_{name}.png"), report)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="iresnet-lab",
        description="Invertible residual networks for deblurring/diffusion "
                    "inverse problems: data, training, reconstruction, studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="key=value defaults file")
    _add_options(p, _SYNTH_OPTS)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on paired data")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None)
    _add_options(p, _TRAIN_OPTS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="invert observed data with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset directory (with ground truth)")
    p.add_argument("--input-raw", default=None, help="raw binary of observed images")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--config", default=None)
    _add_options(p, _RECON_OPTS)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("study", help="run a regularization/saliency study")
    p.add_argument("--kind", required=True,
                   choices=["inversion", "local-approx", "approx-quality",
                            "direction", "saliency"])
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_options(p, _STUDY_OPTS)
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for contract errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
