"""Command line entry point.

Exit codes: 0 success, 1 runtime failure or divergence, 2 usage/config/data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import dataio
from .dataio import SyntheticSpec
from .errors import ConfigurationError, DataError, RaclapError
from .evaluation import Direction, EmbeddingSet, evaluate, score_candidates
from .losses import DistillTemperatures, Modality
from .model import ClapModel, LayerStack, encode_speech, encode_text
from .training import TrainConfig, train_distill, train_pretrain

log = logging.getLogger("raclap")


# --------------------------------------------------------------------------
# config


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "null") else float(text)


def _tags(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


SCHEMA = {
    "seed": (int, 0),
    "train.learning_rate": (float, 2e-5),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.99),
    "train.adam_epsilon": (float, 1e-8),
    "train.batch_size": (int, 192),
    "train.epochs": (int, 15),
    "train.loss_mode": (str, "symmetric"),
    "train.balanced_sampling": (_bool, True),
    "train.dataset_tags": (_tags, ()),
    "train.grad_clip": (_optional_float, None),
    "train.early_stop_tolerance": (_optional_float, None),
    "train.checkpoint_every_epoch": (_bool, False),
    "distill.eps_s": (float, DistillTemperatures().eps_s),
    "distill.eps_t": (float, DistillTemperatures().eps_t),
    "distill.teacher_scale": (float, DistillTemperatures().teacher_scale),
    "distill.teacher_transpose": (_bool, True),
    "distill.normalize_by_rows": (_bool, False),
    "model.speech_hidden": (int, 0),
    "model.text_hidden": (int, 0),
    "model.init_temperature": (float, 0.07),
    "model.learn_temperature": (_bool, True),
    "data.eval_manifest": (str, ""),
}
for _f in fields(SyntheticSpec):
    if _f.name not in ("seed", "tags"):
        SCHEMA[f"synth.{_f.name}"] = (float if isinstance(_f.default, float) else int, _f.default)
SCHEMA["synth.tags"] = (_tags, ())


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{lineno}: expected 'dotted.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def resolve_config(config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects dotted.key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    if seed is not None:
        raw["seed"] = str(seed)
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key {key!r}")
        convert = SCHEMA[key][0]
        try:
            cfg[key] = convert(value)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from None
    return cfg


def format_config(cfg: dict) -> str:
    def show(v):
        if isinstance(v, tuple):
            return ",".join(v)
        return "none" if v is None else str(v)
    return "".join(f"{k} = {show(v)}\n" for k, v in sorted(cfg.items()))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["train.learning_rate"], beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"], adam_epsilon=cfg["train.adam_epsilon"],
        batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"], seed=cfg["seed"],
        loss_mode=cfg["train.loss_mode"],
        temperatures=DistillTemperatures(cfg["distill.eps_s"], cfg["distill.eps_t"],
                                         cfg["distill.teacher_scale"]),
        balanced_sampling=cfg["train.balanced_sampling"],
        dataset_tags=cfg["train.dataset_tags"],
        teacher_transpose=cfg["distill.teacher_transpose"],
        normalize_by_rows=cfg["distill.normalize_by_rows"],
        grad_clip=cfg["train.grad_clip"],
        early_stop_tolerance=cfg["train.early_stop_tolerance"],
    )


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    kwargs = {f.name: cfg[f"synth.{f.name}"] for f in fields(SyntheticSpec)
              if f.name not in ("seed", "tags")}
    tags = cfg["synth.tags"] or None
    return SyntheticSpec(seed=cfg["seed"], tags=tags, **kwargs)


def _reproducible_echo(cfg: dict) -> dict:
    """Config stored inside checkpoints: everything except filesystem paths."""
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(cfg.items()) if not k.startswith(("data.", "synth."))}


# --------------------------------------------------------------------------
# helpers


def _require(value, flag: str):
    if not value:
        raise ConfigurationError(f"{flag} is required for this command")
    return value


def _out_dir(args) -> Path:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path: str, tags=None):
    manifest = dataio.load_manifest(path)
    if len(manifest) == 0:
        raise DataError(f"manifest {path} has no entries")
    return dataio.load_features(manifest, tags or None)


def _check_compatible(hp: dict, data) -> None:
    expected = (hp["num_layers"], hp["speech_dim"], hp["text_dim"])
    found = (data.num_layers, data.speech_dim, data.text_dim)
    if expected != found:
        raise ConfigurationError(
            f"checkpoint expects (L, D, D') = {expected}, manifest features have {found}"
        )


def _write_reports(reports: dict, out: Path | None) -> None:
    for direction, report in reports.items():
        name = Direction(direction).value
        sys.stdout.write(report.to_text())
        print(report.percent_line())
        if out is not None:
            (out / f"metrics_{name}.txt").write_text(report.to_text(), encoding="utf-8")
            (out / f"metrics_{name}.json").write_text(report.to_json(), encoding="utf-8")


def _log_writer(path: Path):
    path.write_text("", encoding="utf-8")

    def write(record, model, state):
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(record.to_line() + "\n")
    return write


def _echo(cfg: dict, out: Path) -> None:
    text = format_config(cfg)
    (out / "config_effective.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# --------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args, cfg: dict) -> int:
    out = _out_dir(args)
    corpus = dataio.generate_synthetic(synthetic_spec(cfg), out)
    _echo(cfg, out)
    print(f"manifest={corpus.manifest}")
    print(f"train_manifest={corpus.train_manifest}")
    if corpus.eval_manifest is not None:
        print(f"eval_manifest={corpus.eval_manifest}")
    return 0


def _epoch_hook(log_path: Path, out: Path, stage: str, cfg: dict, tcfg: TrainConfig):
    write_log = _log_writer(log_path)
    echo = _reproducible_echo(cfg)

    def hook(record, model, state):
        write_log(record, model, state)
        if cfg["train.checkpoint_every_epoch"]:
            dataio.save_checkpoint(model, out / f"model_{stage}_epoch{record.epoch:03d}.ckpt",
                                   stage=stage, seed=tcfg.seed, config=echo, optimizer=state)
    return hook


def _eval_after_training(model, cfg: dict, train_manifest: str, tags, out: Path) -> None:
    eval_path = cfg["data.eval_manifest"] or train_manifest
    data = _load_data(eval_path, None if cfg["data.eval_manifest"] else tags)
    _write_reports(evaluate(model, data), out)


def cmd_train(args, cfg: dict) -> int:
    manifest = _require(args.manifest, "--manifest")
    out = _out_dir(args)
    tcfg = train_config(cfg)
    data = _load_data(manifest, tcfg.dataset_tags)
    model = ClapModel(data.num_layers, data.speech_dim, data.text_dim,
                      cfg["model.speech_hidden"] or None, cfg["model.text_hidden"] or None,
                      seed=tcfg.seed, init_temperature=cfg["model.init_temperature"],
                      learn_temperature=cfg["model.learn_temperature"])
    _echo(cfg, out)
    result = train_pretrain(model, data, tcfg,
                            on_epoch=_epoch_hook(out / "train_log.txt", out, "pretrain", cfg, tcfg))
    dataio.save_checkpoint(result.model, out / "model_pretrain.ckpt", stage="pretrain",
                           seed=tcfg.seed, config=_reproducible_echo(cfg),
                           optimizer=result.optimizer)
    _eval_after_training(result.model, cfg, manifest, tcfg.dataset_tags, out)
    return 0


def cmd_distill(args, cfg: dict) -> int:
    manifest = _require(args.manifest, "--manifest")
    ckpt = dataio.load_checkpoint(_require(args.teacher, "--teacher"))
    if ckpt.stage == "distill":
        log.warning("teacher checkpoint is itself a distilled model; continuing")
    out = _out_dir(args)
    tcfg = train_config(cfg)
    data = _load_data(manifest, tcfg.dataset_tags)
    _check_compatible(ckpt.hyperparameters, data)
    teacher = ckpt.to_teacher()
    student = teacher.make_student()
    _echo(cfg, out)
    result = train_distill(teacher, student, data, tcfg,
                           on_epoch=_epoch_hook(out / "distill_log.txt", out, "distill", cfg, tcfg))
    dataio.save_checkpoint(result.model, out / "model_distill.ckpt", stage="distill",
                           seed=tcfg.seed, config=_reproducible_echo(cfg),
                           optimizer=result.optimizer)
    _eval_after_training(result.model, cfg, manifest, tcfg.dataset_tags, out)
    return 0


def cmd_eval(args, cfg: dict) -> int:
    ckpt = dataio.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = _load_data(_require(args.manifest, "--manifest"))
    _check_compatible(ckpt.hyperparameters, data)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _write_reports(evaluate(ckpt.to_model(), data), out)
    return 0


def cmd_retrieve(args, cfg: dict) -> int:
    ckpt = dataio.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    query = dataio.read_feature_file(_require(args.query, "--query"))
    data = _load_data(_require(args.manifest, "--manifest"))
    _check_compatible(ckpt.hyperparameters, data)
    model = ckpt.to_model()
    if isinstance(query, LayerStack):
        q = encode_speech(model, query)
        catalogue = EmbeddingSet(data.ids, model.embed_text(data.text), Modality.TEXT)
        direction = Direction.AUDIO_TO_TEXT
    else:
        q = encode_text(model, query)
        catalogue = EmbeddingSet(data.ids, model.embed_speech(data.speech), Modality.SPEECH)
        direction = Direction.TEXT_TO_AUDIO
    top_k = args.top_k
    if top_k < 1:
        raise ConfigurationError("--top-k must be >= 1")
    if top_k > len(catalogue):
        log.warning("top_k %d exceeds catalogue size %d; clamping", top_k, len(catalogue))
        top_k = len(catalogue)
    print(f"# direction={direction.value}")
    for rank, (cid, score) in enumerate(score_candidates(q, catalogue)[:top_k], start=1):
        print(f"{rank}\t{cid}\t{score:.6f}")
    return 0


def cmd_inspect(args, cfg: dict) -> int:
    ckpt = dataio.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    summary = dataio.checkpoint_summary(ckpt)
    print(f"stage={summary['stage']}")
    print(f"seed={summary['seed']}")
    for k, v in sorted(summary["hyperparameters"].items()):
        print(f"{k}={v}")
    print("layer_weights=" + ",".join(f"{a:.6f}" for a in summary["layer_weights"]))
    print(f"temperature={summary['temperature']:.6f}")
    print(f"has_optimizer_state={summary['has_optimizer_state']}")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raclap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")
        p.add_argument("--teacher")
        p.add_argument("--query")
        p.add_argument("--top-k", type=int, default=10)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](args, cfg)
    except RaclapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: not found", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
