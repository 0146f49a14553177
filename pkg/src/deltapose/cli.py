"""Command line surface: data generation, training, gradient checking,
tracking, evaluation, and the ablation matrix.

Exit codes: 0 success, 1 user or config error, 2 internal invariant
violation.
"""

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import config, datagen, evaluation, geometry, net, tracker


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; route usage problems through our exit codes
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(sp):
    sp.add_argument("--config", type=Path, default=None,
                    help="JSON overlay onto the built-in defaults")
    sp.add_argument("--seed", type=int, default=None,
                    help="run seed; every stage derives its own substream")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deltapose",
                     description="6-DoF pose tracking pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    sp = sub.add_parser("gen-data", parents=[], help="render training pairs")
    _add_common(sp)
    sp.add_argument("--count", type=int, default=None,
                    help="pair count (default from config)")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--no-physics", action="store_true",
                    help="skip the settling simulation when placing objects")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("gen-seq", help="render a tracking sequence")
    _add_common(sp)
    sp.add_argument("--frames", type=int, default=None,
                    help="frame count (default from config)")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_gen_seq)

    sp = sub.add_parser("train", help="train the twist regressor")
    _add_common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True,
                    help="checkpoint path; loss curve lands beside it")
    sp.add_argument("--ablate", default=None,
                    choices=["shared-encoder", "no-depth", "quaternion"])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grad-check",
                        help="verify backprop against central differences")
    _add_common(sp)
    sp.add_argument("--h", type=float, default=1e-3,
                    help="finite-difference step")
    sp.add_argument("--tol", type=float, default=1e-2,
                    help="max relative error allowed")
    sp.add_argument("--batch", type=int, default=4)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("track", help="run the tracking loop over a sequence")
    _add_common(sp)
    sp.add_argument("--seq", type=Path, required=True)
    sp.add_argument("--mesh", type=Path, required=True)
    sp.add_argument("--predictor", required=True,
                    help="net:CKPT | gn | oracle")
    sp.add_argument("--reinit", action="store_true",
                    help="recover from drift using the sequence ground truth")
    sp.add_argument("--out", type=Path, required=True,
                    help="trajectory CSV path")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="score a trajectory against ground truth")
    _add_common(sp)
    sp.add_argument("--seq", type=Path, required=True)
    sp.add_argument("--traj", type=Path, required=True)
    sp.add_argument("--mesh", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True,
                    help="report directory")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate",
                        help="train and score the full variant matrix")
    _add_common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_ablate)

    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    doc = config.load_config(args.config, seed=args.seed)
    if args.no_physics:
        doc["datagen"]["scene"]["settle_physics"] = False
    count = args.count if args.count is not None else doc["datagen"]["count"]
    manifest = datagen.generate_dataset(
        config.scene_config(doc), config.intrinsics(doc),
        config.perturb_range(doc), count, args.out,
        config.augment_params(doc))
    print(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_gen_seq(args) -> int:
    doc = config.load_config(args.config, seed=args.seed)
    frames = args.frames if args.frames is not None else doc["datagen"]["n_frames"]
    manifest = datagen.generate_sequence(
        config.scene_config(doc, stream="sequence"), config.intrinsics(doc),
        config.motion_params(doc), frames, args.out)
    print(json.dumps(manifest, sort_keys=True))
    return 0


def _apply_ablation(net_cfg: net.NetConfig, name) -> net.NetConfig:
    mods = {"shared-encoder": {"shared_encoder": True},
            "no-depth": {"use_depth": False},
            "quaternion": {"rot_rep": "quaternion"}}
    if name is None:
        return net_cfg
    return dataclasses.replace(net_cfg, **mods[name])


def _write_loss_curve(path, losses) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, f"{loss:.17g}"])


def cmd_train(args) -> int:
    doc = config.load_config(args.config, seed=args.seed)
    net_cfg = _apply_ablation(config.net_config(doc), args.ablate)
    data = datagen.load_training_arrays(args.data, net_cfg)
    params, losses = net.train(net_cfg, data, config.train_params(doc),
                               config.substream(doc["seed"], "train"),
                               checkpoint_path=args.out)
    _write_loss_curve(Path(str(args.out) + ".losses.csv"), losses)
    print(json.dumps({"checkpoint": str(args.out), "steps": len(losses),
                      "final_loss": losses[-1],
                      "params": net.param_count(params)}, sort_keys=True))
    return 0


def _grad_check_batch(net_cfg, batch, rng):
    side = net_cfg.input_side
    xp = rng.standard_normal((batch, 4, side, side)).astype(np.float32) * 0.5
    xc = rng.standard_normal((batch, 4, side, side)).astype(np.float32) * 0.5
    t = np.zeros((batch, 3), dtype=np.float32)
    rot = np.zeros((batch, net_cfg.rot_dim), dtype=np.float32)
    for i in range(batch):
        from .se3 import Twist
        delta = Twist(rng.uniform(-0.02, 0.02, size=3),
                      rng.uniform(-0.2, 0.2, size=3))
        t[i] = delta.t
        rot[i] = net.rotation_target(delta, net_cfg)
    return xp, xc, t, rot


def cmd_grad_check(args) -> int:
    doc = config.load_config(args.config, seed=args.seed)
    net_cfg = config.net_config(doc)
    rng = config.substream(doc["seed"], "grad-check")
    params = net.init_params(net_cfg, rng)
    xp, xc, t, rot = _grad_check_batch(net_cfg, args.batch, rng)
    err = net.grad_check(params, net_cfg, xp, xc, t, rot, h=args.h, rng=rng)
    status = "ok" if err <= args.tol else "FAIL"
    print(f"grad-check h={args.h:g} batch={args.batch} "
          f"max_rel_err={err:.3e} tol={args.tol:g} {status}")
    return 0 if err <= args.tol else 1


def _build_predictor(spec: str, doc, dataset):
    if spec == "oracle":
        return tracker.OraclePredictor(dataset.poses), None
    if spec == "gn":
        return tracker.GnPredictor(config.gn_config(doc)), None
    if spec.startswith("net:"):
        pred = tracker.NetPredictor.from_checkpoint(spec[len("net:"):])
        return pred, pred.cfg.input_side
    raise UsageError(f"unknown predictor '{spec}' (want net:CKPT, gn, oracle)")


def cmd_track(args) -> int:
    doc = config.load_config(args.config, seed=args.seed)
    dataset = evaluation.load_sequence(args.seq)
    mesh = geometry.load_mesh(args.mesh)
    predictor, forced_side = _build_predictor(args.predictor, doc, dataset)
    tracker_cfg = config.tracker_config(doc, dataset.intrinsics, mesh)
    if forced_side is not None and forced_side != tracker_cfg.input_side:
        # the checkpoint dictates the crop size it was trained with
        tracker_cfg = dataclasses.replace(tracker_cfg, input_side=forced_side)
    policy = config.reinit_policy(doc, enabled=args.reinit)
    provider = (lambda idx: dataset.poses[idx]) if args.reinit else None
    poses, statuses = tracker.track_sequence(
        dataset.poses[0], evaluation.iter_frames(dataset), predictor,
        tracker_cfg, policy, provider)
    tracker.save_trajectory(args.out, poses, statuses)
    print(json.dumps({"out": str(args.out), "frames": len(poses),
                      "lost": statuses.count("lost"),
                      "reinits": statuses.count("reinit")}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    doc = config.load_config(args.config, seed=args.seed)
    dataset = evaluation.load_sequence(args.seq)
    mesh = geometry.load_mesh(args.mesh)
    poses, _ = tracker.load_trajectory(args.traj)
    report = evaluation.evaluate(poses, dataset, mesh,
                                 doc["eval"]["max_threshold"],
                                 doc["eval"]["steps"])
    summary = evaluation.write_report(report, args.out)
    config.validate_report(summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


ABLATION_VARIANTS = ("ours", "no-physics", "no-depth", "shared-encoder",
                     "quaternion")


def cmd_ablate(args) -> int:
    doc = config.load_config(args.config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    K = config.intrinsics(doc)
    perturb = config.perturb_range(doc)
    augment = config.augment_params(doc)
    count = doc["datagen"]["count"]

    seq_dir = out / "sequence"
    datagen.generate_sequence(config.scene_config(doc, stream="ablate-seq"),
                              K, config.motion_params(doc),
                              doc["datagen"]["n_frames"], seq_dir)
    dataset = evaluation.load_sequence(seq_dir)
    mesh = geometry.load_mesh(seq_dir / "target.obj")

    scene = config.scene_config(doc, stream="ablate-data")
    data_full = out / "train_full"
    datagen.generate_dataset(scene, K, perturb, count, data_full, augment)
    scene_np = datagen.SceneConfig.from_dict(
        {**scene.to_dict(), "settle_physics": False})
    data_nophys = out / "train_nophysics"
    datagen.generate_dataset(scene_np, K, perturb, count, data_nophys, augment)

    base_cfg = config.net_config(doc)
    train_opt = config.train_params(doc)
    rows = []
    for name in ABLATION_VARIANTS:
        net_cfg = _apply_ablation(base_cfg,
                                  None if name in ("ours", "no-physics") else name)
        data_dir = data_nophys if name == "no-physics" else data_full
        data = datagen.load_training_arrays(data_dir, net_cfg)
        params, _ = net.train(net_cfg, data, train_opt,
                              config.substream(doc["seed"], f"ablate-{name}"))
        net.save_checkpoint(out / f"{name}.ckpt", net_cfg, params)
        tracker_cfg = config.tracker_config(doc, dataset.intrinsics, mesh)
        poses, _ = tracker.track_sequence(
            dataset.poses[0], evaluation.iter_frames(dataset),
            tracker.NetPredictor(params, net_cfg), tracker_cfg)
        report = evaluation.evaluate(poses, dataset, mesh,
                                     doc["eval"]["max_threshold"],
                                     doc["eval"]["steps"])
        if not (np.isfinite(report.auc_add) and np.isfinite(report.auc_adds)):
            raise RuntimeError(f"variant {name} produced non-finite AUC")
        rows.append((name, report.auc_add, report.auc_adds))

    table = out / "ablation.csv"
    with open(table, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "auc_add", "auc_adds"])
        for name, a, s in rows:
            writer.writerow([name, f"{a:.17g}", f"{s:.17g}"])
    print(json.dumps({"table": str(table),
                      "rows": {n: [a, s] for n, a, s in rows}}, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, jsonschema.ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
