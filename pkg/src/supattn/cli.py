"""Command-line entry point.

Every command reads ``key = value`` settings from ``--config`` plus
``--key value`` overrides, rejects unknown keys, and echoes the effective
settings next to its outputs.  Exit codes: 0 success, 2 configuration error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import data as D
from . import gradcheck
from .alignment import AlignmentError, build_target, normalize_representation
from .diffcore import NumericError
from .evaluation import UttScore, evaluate, format_per, write_scores
from .losses import InfeasibleTargetError
from .model import ConfigError, DecoderConfig, EncoderConfig, InputTooShortError, ModelConfig
from .training import NO_SUPERVISION, TrainConfig, TrainingDataError, train, write_log_csv

log = logging.getLogger("supattn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliConfigError(Exception):
    pass


def _optional(kind: Callable) -> Callable:
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else kind(text)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _choice(*options: str) -> Callable:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    parse.__name__ = "choice"
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str


KEYS: dict[str, Key] = {
    # shared
    "name": Key(str, "run"),
    "runs_dir": Key(str, "runs"),
    "seed": Key(int, "0"),
    "jobs": Key(int, "1"),
    # synthetic data
    "out_dir": Key(str, "data/synth"),
    "vocab_size": Key(int, "10"),
    "utterances": Key(int, "220"),
    "dmin": Key(int, "2"),
    "dmax": Key(int, "6"),
    "tokens_min": Key(int, "3"),
    "tokens_max": Key(int, "8"),
    "feature_dim": Key(int, "16"),
    "noise_std": Key(float, "0.3"),
    # datasets
    "data_dir": Key(str, "data/synth"),
    "dev_dir": Key(_optional(str), "none"),
    "eval_dir": Key(_optional(str), "none"),
    "eval_split": Key(_choice("dev", "train", "all"), "dev"),
    # model
    "enc_layers": Key(int, "2"),
    "enc_cells": Key(int, "32"),
    "subsample_after": Key(_int_list, "1"),
    "subsample_mode": Key(_choice("concat", "stride"), "concat"),
    "embed_dim": Key(int, "16"),
    "dec_hidden": Key(int, "64"),
    "fc_layers": Key(int, "2"),
    # training
    "epochs": Key(int, "30"),
    "gamma": Key(float, "0.5"),
    "gamma_off_epoch": Key(_optional(int), "none"),
    "dropout": Key(float, "0.4"),
    "lambda_ctc": Key(float, "0.0"),
    "representation": Key(str, "uni"),
    "rho": Key(float, "0.95"),
    "eps": Key(float, "1e-6"),
    "clip_norm": Key(_optional(float), "none"),
    "save_checkpoints": Key(_choice("every", "best"), "every"),
    "max_len_extra": Key(int, "10"),
    # evaluation and inspection
    "checkpoint": Key(_optional(str), "none"),
    "stats": Key(_optional(str), "none"),
    "targets_dir": Key(_optional(str), "none"),
}


def read_config_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliConfigError(f"{path}:{n}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict[str, Any]:
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise CliConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = {}
    for key, spec in KEYS.items():
        text = raw.get(key, spec.default)
        try:
            cfg[key] = spec.parse(text)
        except ValueError as exc:
            raise CliConfigError(f"bad value {text!r} for {key}: {exc}") from None
    cfg["_raw"] = {k: raw.get(k, spec.default) for k, spec in KEYS.items()}
    return cfg


def echo_config(cfg: dict[str, Any], path) -> None:
    with open(path, "w") as f:
        for key in sorted(cfg["_raw"]):
            f.write(f"{key} = {cfg['_raw'][key]}\n")


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise CliConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise CliConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        out[key] = value
    return out


# ----------------------------------------------------------------- helpers


def model_config(cfg, input_dim: int, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        EncoderConfig(input_dim=input_dim, layers=cfg["enc_layers"], cells_per_direction=cfg["enc_cells"],
                      subsample_after=cfg["subsample_after"], subsample_mode=cfg["subsample_mode"]),
        DecoderConfig(vocab_size=vocab_size, embed_dim=cfg["embed_dim"], hidden_dim=cfg["dec_hidden"],
                      fc_layers=cfg["fc_layers"]),
        ctc_head=cfg["lambda_ctc"] > 0)


def train_config(cfg) -> TrainConfig:
    rep = cfg["representation"]
    rep = NO_SUPERVISION if rep == NO_SUPERVISION else normalize_representation(rep)
    return TrainConfig(
        epochs=cfg["epochs"], gamma=cfg["gamma"], gamma_off_epoch=cfg["gamma_off_epoch"],
        dropout=cfg["dropout"], lambda_ctc=cfg["lambda_ctc"], representation=rep, seed=cfg["seed"],
        rho=cfg["rho"], eps=cfg["eps"], clip_norm=cfg["clip_norm"], max_len_extra=cfg["max_len_extra"])


def run_dir(cfg) -> Path:
    return Path(cfg["runs_dir"]) / cfg["name"]


def _prepare_dir(path: Path, force: bool, marker: str | None = None) -> None:
    occupied = path.exists() and (any(path.iterdir()) if marker is None else (path / marker).exists())
    if occupied:
        if not force:
            raise CliConfigError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def load_splits(cfg):
    """``(train, dev, vocab)`` from ``data_dir``, or ``data_dir`` + ``dev_dir``."""
    utts, vocab = D.load_dataset_dir(cfg["data_dir"])
    if cfg["dev_dir"]:
        dev, dev_vocab = D.load_dataset_dir(cfg["dev_dir"])
        if dev_vocab != vocab:
            raise D.DataError("dev vocabulary differs from training vocabulary")
        return utts, dev, vocab
    train_set, dev = D.split_train_dev(utts)
    return train_set, dev, vocab


# ---------------------------------------------------------------- commands


def cmd_gen_synth(cfg, force: bool) -> int:
    try:
        spec = D.SynthSpec(vocab_size=cfg["vocab_size"], utterances=cfg["utterances"], dmin=cfg["dmin"],
                           dmax=cfg["dmax"], tokens_min=cfg["tokens_min"], tokens_max=cfg["tokens_max"],
                           feature_dim=cfg["feature_dim"], noise_std=cfg["noise_std"], seed=cfg["seed"])
    except D.DataError as exc:
        raise CliConfigError(str(exc)) from None
    out = Path(cfg["out_dir"])
    _prepare_dir(out, force)
    utts, vocab = D.generate_synthetic(spec)
    D.save_dataset_dir(out, utts, vocab)
    echo_config(cfg, out / "config.echo")
    frames = sum(u.num_frames for u in utts)
    tokens = sum(len(u.tokens) - 1 for u in utts)
    print(f"wrote {len(utts)} utterances, {frames} frames, {tokens} tokens, "
          f"vocabulary {len(vocab) - 1} + end token to {out}")
    return EXIT_OK


def cmd_train(cfg, force: bool) -> int:
    tcfg = train_config(cfg)
    train_set, dev, vocab = load_splits(cfg)
    if not train_set:
        raise D.DataError("training split is empty")
    rd = run_dir(cfg)
    _prepare_dir(rd, force, marker="config.echo")
    echo_config(cfg, rd / "config.echo")
    train_set, (mean, var) = D.normalize_global(train_set)
    dev = D.apply_normalization(dev, mean, var)
    D.write_stats(rd / "norm.stats", mean, var)
    mc = model_config(cfg, train_set[0].features.shape[1], len(vocab))
    ckpt = rd / "ckpt"
    ckpt.mkdir(exist_ok=True)
    best = [math.inf, math.inf]

    def on_epoch_end(epoch, params, logs):
        write_log_csv(rd / "log.csv", logs)
        if cfg["save_checkpoints"] == "every":
            D.save_checkpoint(ckpt / f"epoch_{epoch:03d}.npz", params)
            return
        dev_rows = [r for r in logs if r.epoch == epoch and r.split == "dev"]
        row = dev_rows[0] if dev_rows else [r for r in logs if r.epoch == epoch][0]
        key = [row.per if not math.isnan(row.per) else math.inf, row.ce]
        if key < best:
            best[:] = key
            D.save_checkpoint(ckpt / "best.npz", params)

    print(f"training on {len(train_set)} utterances, dev {len(dev)}, run directory {rd}")
    _, logs = train(train_set, dev, mc, tcfg, on_epoch_end=on_epoch_end, jobs=cfg["jobs"])
    last = [r for r in logs if r.epoch == tcfg.epochs]
    for r in last:
        print(f"epoch {r.epoch} {r.split}: ce {r.ce:.4f} attn {r.attn:.4f} per {r.per:.1f} gamma {r.gamma:g}")
    return EXIT_OK


def _eval_set(cfg, mean, var):
    if cfg["eval_dir"]:
        utts, vocab = D.load_dataset_dir(cfg["eval_dir"])
    else:
        train_set, dev, vocab = load_splits(cfg)
        utts = {"dev": dev, "train": train_set, "all": train_set + dev}[cfg["eval_split"]]
    return D.apply_normalization(utts, mean, var), vocab


def cmd_eval(cfg, force: bool) -> int:
    if not cfg["checkpoint"]:
        raise CliConfigError("eval needs --checkpoint <path>")
    ckpt_path = Path(cfg["checkpoint"])
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt_path} not found")
    params = D.load_checkpoint(ckpt_path)
    rd = run_dir(cfg)
    stats_path = Path(cfg["stats"]) if cfg["stats"] else rd / "norm.stats"
    mean, var = D.read_stats(stats_path)
    utts, vocab = _eval_set(cfg, mean, var)
    if not utts:
        raise D.DataError("evaluation set is empty")
    mc = model_config(cfg, utts[0].features.shape[1], len(vocab))
    _check_shapes(params, mc)
    results = evaluate(utts, params, mc, cfg["max_len_extra"], cfg["jobs"])
    rd.mkdir(parents=True, exist_ok=True)
    total = write_scores(rd / "scores.tsv", [UttScore(r.utt_id, r.counts, r.attn_dist) for r in results])
    print(f"PER {format_per(total)}% over {len(results)} utterances "
          f"(S {total.substitutions} I {total.insertions} D {total.deletions} N {total.reference_length}); "
          f"scores in {rd / 'scores.tsv'}")
    return EXIT_OK


def _check_shapes(params, mc: ModelConfig) -> None:
    from .model import init_params

    expected = init_params(mc, np.random.default_rng(0))
    want = {k: v.shape for k, v in expected.items()}
    have = {k: v.shape for k, v in params.items()}
    if want != have:
        diff = sorted(set(want.items()) ^ set(have.items()))
        raise ConfigError(f"checkpoint does not match the model configuration: {diff[:4]}")


# one character per weight decile; exact zeros stay blank
HEAT_CHARS = ".:-=+*#%&@"


def heatmap(matrix: np.ndarray) -> list[str]:
    """One text row per target row; characters step with the weight decile."""
    lines = []
    for row in matrix:
        cells = "".join(HEAT_CHARS[min(9, int(w * 10))] if w > 0 else " " for w in row)
        lines.append(f"|{cells}| {row.sum():.6f}")
    return lines


def cmd_build_targets(cfg, force: bool) -> int:
    rep = normalize_representation(cfg["representation"])
    utts, vocab = D.load_dataset_dir(cfg["data_dir"])
    r = 2 ** len(cfg["subsample_after"])
    out = Path(cfg["targets_dir"]) if cfg["targets_dir"] else run_dir(cfg) / "targets"
    _prepare_dir(out, force)
    echo_config(cfg, out / "config.echo")
    matrices, skipped = [], 0
    with open(out / "heatmaps.txt", "w") as hm:
        for u in utts:
            if u.alignment is None and rep != "even":
                skipped += 1
                continue
            target = build_target(rep, r, align=u.alignment, total_frames=u.num_frames,
                                  num_tokens=len(u.tokens) - 1)
            matrices.append((u.id, target.matrix))
            hm.write(f"UTT {u.id} {rep} r={r}\n")
            hm.write("\n".join(heatmap(target.matrix)) + "\n")
    D.write_features(out / "targets.txt", matrices)
    for _, m in matrices:
        for s in m.sum(axis=1):
            print(f"{s:.6f}", end=" ")
    print()
    print(f"wrote {len(matrices)} {rep} target matrices at subsample {r} to {out}"
          + (f"; skipped {skipped} without alignment" if skipped else ""))
    return EXIT_OK


def cmd_grad_check(cfg, force: bool) -> int:
    results = gradcheck.run_all(seed=cfg["seed"])
    print(gradcheck.format_report(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "build-targets": cmd_build_targets,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="supattn",
        description="Supervised-attention sequence-to-sequence experiments.",
        epilog="Any config key may also be given as --key value.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="file of 'key = value' lines")
    p.add_argument("--seed", help="random seed")
    p.add_argument("--jobs", help="evaluation worker processes")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = read_config_file(args.config) if args.config else {}
        for key in ("seed", "jobs"):
            if getattr(args, key) is not None:
                raw[key] = getattr(args, key)
        raw.update(parse_overrides(rest))
        cfg = resolve_config(raw)
        return COMMANDS[args.command](cfg, args.force)
    except (CliConfigError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, AlignmentError, TrainingDataError, InputTooShortError,
            InfeasibleTargetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
