"""Command line entry points: pretrain, posttrain, edit, eval, metrics.

Failures print one line ``styledit-error: <kind>: <message>`` to stderr and
exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import netpbm
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .denoiser import ConditioningTriple, Denoiser
from .diffusion import pretrain, sample_trajectory
from .evalkit import eval_report, read_policy_table, table_metrics
from .guidance import GuidanceScales
from .rlaif import init_train_state, posttrain_step
from .scoring import semantic_score, structural_score
from .synth import make_dataset

ERROR_PREFIX = "styledit-error"


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in keys])
    return buf.getvalue()


def _write(path: str, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        with open(path, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
    except OSError as e:
        raise CliError("io", f"cannot write {path}: {e.strerror}") from None


def _out_dir(cfg: RunConfig) -> str:
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
    except OSError as e:
        raise CliError("io", f"cannot create output directory {cfg.out_dir}: {e.strerror}") from None
    return cfg.out_dir


def _save(path: str, ckpt: Checkpoint) -> None:
    try:
        save_checkpoint(path, ckpt)
    except OSError as e:
        raise CliError("io", f"cannot write {path}: {e.strerror}") from None


def _config(path: str) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as e:
        raise CliError("config", str(e)) from None


def _checkpoint(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise CliError("io", f"cannot read {path}: {e.strerror}") from None
    except CheckpointError as e:
        raise CliError("checkpoint", f"{path}: {e}") from None


def _checkpoint_config(ckpt: Checkpoint, path: str) -> RunConfig:
    try:
        return config_from_dict(ckpt.config)
    except ConfigError as e:
        raise CliError("checkpoint", f"{path}: embedded config is invalid: {e}") from None


def _model_for(cfg: RunConfig, ckpt: Checkpoint, path: str) -> Denoiser:
    model = Denoiser(cfg.model)
    try:
        model.check_params(ckpt.params)
    except ValueError:
        raise CliError("architecture", f"{path}: parameter layout does not match the configured denoiser") from None
    return model


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    out = _out_dir(cfg)
    model = Denoiser(cfg.model)
    data = make_dataset(cfg.pretrain.dataset_size, cfg.seed, cfg.concepts, cfg.bank_seed, cfg.model.height)
    params, losses = pretrain(
        model,
        model.init_params(cfg.seed),
        data,
        cfg.schedule.build(),
        cfg.pretrain.steps,
        cfg.pretrain.batch_size,
        cfg.pretrain.lr,
        cfg.seed,
        cfg.pretrain.dropout,
    )
    _write(os.path.join(out, "pretrain_metrics.csv"), csv_text([{"step": i, "ddpm_loss": v} for i, v in enumerate(losses)]))
    _save(os.path.join(out, "pretrain.ckpt"), Checkpoint(params, cfg.to_dict(), cfg.pretrain.steps, "base"))
    if losses:
        print(f"pretrain: {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return 0


def cmd_posttrain(args) -> int:
    cfg = _config(args.config)
    base = _checkpoint(args.base)
    model = _model_for(cfg, base, args.base)
    out = _out_dir(cfg)
    sched = cfg.schedule.build()
    trainer = cfg.trainer()
    state = init_train_state(base.params, trainer)
    rows = []
    every = cfg.posttrain.checkpoint_every
    for i in range(cfg.posttrain.steps):
        state, report = posttrain_step(model, state, trainer, sched, cfg.score)
        rows.append(report.as_row())
        if every and (i + 1) % every == 0:
            _save(os.path.join(out, f"posttrain_step{i + 1}.ckpt"), Checkpoint(state.params, cfg.to_dict(), state.step, "posttrained"))
    _write(os.path.join(out, "posttrain_metrics.csv"), csv_text(rows))
    _save(os.path.join(out, "posttrain.ckpt"), Checkpoint(state.params, cfg.to_dict(), state.step, "posttrained"))
    if rows:
        print(f"posttrain: {len(rows)} steps, dpo loss {rows[0]['dpo_loss']:.6f} -> {rows[-1]['dpo_loss']:.6f}")
    return 0


def _read_image(path: str, shape) -> np.ndarray:
    try:
        img = netpbm.read_ppm(path)
    except OSError as e:
        raise CliError("io", f"cannot read {path}: {e.strerror}") from None
    except netpbm.NetpbmError as e:
        raise CliError("image", f"{path}: {e}") from None
    if img.shape != tuple(shape):
        raise CliError("image", f"{path}: size {img.shape} does not match the configured {tuple(shape)}")
    return img


def cmd_edit(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    cfg = _checkpoint_config(ckpt, args.ckpt)
    model = _model_for(cfg, ckpt, args.ckpt)
    shape = model.image_shape
    inp = _read_image(args.input, shape)
    sty = _read_image(args.style, shape)
    if not 1 <= args.instruction < cfg.model.vocab:
        raise CliError("instruction", f"unknown instruction id {args.instruction}; valid ids are 1..{cfg.model.vocab - 1}")
    defaults = cfg.guidance
    try:
        scales = GuidanceScales(
            defaults.s_in if args.s_in is None else args.s_in,
            defaults.s_sty if args.s_sty is None else args.s_sty,
            defaults.s_t if args.s_t is None else args.s_t,
        )
    except ValueError as e:
        raise CliError("scales", str(e)) from None
    mask = np.ones(shape[:2])
    if args.mask is not None:
        try:
            mask = netpbm.read_pgm(args.mask)
        except (OSError, netpbm.NetpbmError) as e:
            raise CliError("image", f"{args.mask}: {e}") from None
        if mask.shape != shape[:2]:
            raise CliError("image", f"{args.mask}: mask size {mask.shape} does not match {shape[:2]}")
    cond = ConditioningTriple(inp, sty, args.instruction)
    traj = sample_trajectory(model, ckpt.params, cond, args.seed, scales, cfg.schedule.build())
    out = traj.clamped_final()
    _write(args.out, netpbm.encode_ppm(out))
    struct = structural_score(inp, out)
    sem = semantic_score(out, inp, sty, mask, np.ones(shape[:2]), cfg.score.lam)
    print(json.dumps({"struct": struct, "sem": sem, "total": struct + cfg.score.alpha * sem}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    ckpt = _checkpoint(args.ckpt)
    model = _model_for(cfg, ckpt, args.ckpt)
    out = _out_dir(cfg)
    tasks = make_dataset(cfg.eval.tasks, cfg.seed + cfg.eval.task_seed_offset, cfg.concepts, cfg.bank_seed, cfg.model.height)
    report = eval_report(model, ckpt.params, tasks, cfg.guidance, cfg.schedule.build(), cfg.score, cfg.eval.seed, cfg.posttrain.guided)
    stem = args.name or "eval"
    _write(os.path.join(out, f"{stem}.csv"), csv_text(report["rows"]))
    _write(os.path.join(out, f"{stem}.json"), json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report["means"], sort_keys=True))
    return 0


def cmd_metrics(args) -> int:
    try:
        with open(args.table, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise CliError("io", f"cannot read {args.table}: {e.strerror}") from None
    try:
        metrics = table_metrics(read_policy_table(text))
    except ValueError as e:
        raise CliError("table", f"{args.table}: {e}") from None
    if args.out:
        _write(args.out + ".csv", csv_text([metrics]))
        _write(args.out + ".json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="styledit", description="Style-conditioned image editing with self-play preference tuning.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="denoising pretraining on the synthetic task set")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("posttrain", help="self-play DPO post-training from a base checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True)
    p.set_defaults(func=cmd_posttrain)

    p = sub.add_parser("edit", help="edit one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--instruction", type=int, required=True)
    p.add_argument("--mask", help="optional PGM edit mask used for scoring")
    p.add_argument("--s-in", dest="s_in", type=float)
    p.add_argument("--s-sty", dest="s_sty", type=float)
    p.add_argument("--s-t", dest="s_t", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="score a checkpoint on held-out tasks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--name", help="report file stem (default: eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="Pearson r and MMRV for a label,real,sim table")
    p.add_argument("--table", required=True)
    p.add_argument("--out", help="write <out>.csv and <out>.json")
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        msg = str(e).replace("\n", " ")
        print(f"{ERROR_PREFIX}: {e.kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
