"""Command-line entry points: ``train``, ``eval``, ``gen-data``, ``inspect-rules``.

Configs are flat ``key = value`` files.  Relative paths inside a config
resolve against the config's own directory.  Exit codes: 0 success, 2 bad
input or config, 3 incompatible artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import CorpusFormatError, SyntheticConfig, Vocab, generate_synthetic, load_conll, split_corpus, write_conll
from .encoder import CheckpointError, EncoderConfig, load_checkpoint, save_checkpoint
from .logic import GammaConfig, NeuralView, deep_logic, dump_groundings, rule_violations
from .rules import PredicateSchema, RuleSyntaxError, load_schema, parse_ruleset, serialize, validate
from .trainer import NumericalError, TrainConfig, evaluate, predict, score, train

log = logging.getLogger("logicfusion")

EXIT_OK, EXIT_INPUT, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4
PATH_KEYS = ("train", "dev", "test", "rules", "schema")
CHECKPOINT_NAME = "model.npz"
CONFIG_NAME = "config.ini"
METRICS_NAME = "metrics.jsonl"
SUMMARY_NAME = "summary.json"


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise InputError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=lambda: TrainConfig(eval_every=1))
    gamma: GammaConfig = field(default_factory=GammaConfig)
    train: str = ""
    dev: str = ""
    test: str = ""
    rules: str = ""
    schema: str = ""
    out: str = ""

    _SECTIONS = ("encoder", "training", "gamma")

    @classmethod
    def from_mapping(cls, kv: dict[str, str], base: Path = Path(".")) -> "RunConfig":
        cfg = cls()
        parts = {name: dataclasses.asdict(getattr(cfg, name)) for name in cls._SECTIONS}
        for key, raw in kv.items():
            owner = next((name for name in cls._SECTIONS if key in parts[name]), None)
            if owner is not None:
                parts[owner][key] = _coerce(raw, parts[owner][key], key)
            elif key in PATH_KEYS or key == "out":
                setattr(cfg, key, str((base / raw).resolve()) if raw else "")
            else:
                raise InputError(f"unknown config key {key!r}")
        try:
            cfg.encoder = EncoderConfig(**parts["encoder"])
            cfg.training = TrainConfig(**parts["training"])
            cfg.gamma = GammaConfig(**parts["gamma"])
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid config: {exc}") from None
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string("[run]\n" + path.read_text(encoding="utf-8"))
        except configparser.Error as exc:
            raise InputError(f"{path}: {exc}") from None
        return cls.from_mapping(dict(parser["run"]), path.parent)

    def to_text(self) -> str:
        """Flat ``key = value`` echo that :meth:`from_file` reads back unchanged."""
        lines = []
        for name in self._SECTIONS:
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        for key in PATH_KEYS + ("out",):
            lines.append(f"{key} = {getattr(self, key)}")
        return "\n".join(lines) + "\n"


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise InputError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_corpus(path: str, what: str):
    return load_conll(_require_file(path, what))


def _load_rules(cfg: RunConfig, schema: PredicateSchema):
    path = _require_file(cfg.rules, "ruleset")
    rules = parse_ruleset(path.read_text(encoding="utf-8"))
    errors = validate(rules, schema)
    if errors:
        raise InputError(f"ruleset {path} does not match the schema:\n  " + "\n  ".join(errors))
    return rules


def _schema_for(cfg: RunConfig, vocab: Vocab) -> PredicateSchema:
    if cfg.schema:
        return load_schema(_require_file(cfg.schema, "schema"))
    return PredicateSchema.from_labels(vocab.entity_types, vocab.relation_names)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.training.seed = args.seed
    if args.logic is not None:
        cfg.training.logic_enabled = args.logic
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    if not cfg.out:
        raise InputError("no output directory: pass --out or set 'out' in the config")

    corpus = _load_corpus(cfg.train, "training corpus")
    dev = _load_corpus(cfg.dev, "dev corpus") if cfg.dev else None
    test = _load_corpus(cfg.test, "test corpus") if cfg.test else None
    vocab = Vocab.build(corpus)
    schema = _schema_for(cfg, vocab)
    if cfg.training.logic_enabled or cfg.rules:
        rules = _load_rules(cfg, schema)
    else:
        rules = []

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")

    dump_fh = open(args.dump_groundings, "w", encoding="utf-8") if args.dump_groundings else None
    epochs_done = [0]

    def on_sentence(sentence, logic, view):
        # trace the last epoch only
        if dump_fh is not None and epochs_done[0] == cfg.training.epochs - 1:
            dump_groundings(logic, view, dump_fh, sentence.id, cfg.gamma)

    with open(out / METRICS_NAME, "w", encoding="utf-8") as metrics_fh:

        def on_epoch(record):
            row = record.to_dict()
            row.pop("seconds")
            metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
            metrics_fh.flush()
            epochs_done[0] += 1

        try:
            result = train(
                corpus, vocab, rules, schema, cfg.encoder, cfg.training, cfg.gamma,
                dev=dev, on_epoch=on_epoch, on_sentence=on_sentence,
            )
        finally:
            if dump_fh is not None:
                dump_fh.close()

    save_checkpoint(out / CHECKPOINT_NAME, result.params, cfg.encoder, vocab, [r.weight_raw for r in rules])
    summary = {
        "epochs": cfg.training.epochs,
        "final_loss_y": result.history[-1].loss_y if result.history else None,
        "final_loss_d": result.history[-1].loss_d if result.history else None,
        "rules": [{"rule": serialize([r]).strip(), "beta": r.weight} for r in rules],
    }
    if dev is not None:
        summary["dev"] = evaluate(result.params, dev, vocab, cfg.encoder).to_dict()
    if test is not None:
        summary["test"] = evaluate(result.params, test, vocab, cfg.encoder).to_dict()
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _format_prf(name: str, prf) -> str:
    return (
        f"{name:<9} P={prf.precision:.4f} R={prf.recall:.4f} F1={prf.f1:.4f} "
        f"(tp={prf.tp} fp={prf.fp} fn={prf.fn})"
    )


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else None
    ckpt = _require_file(args.checkpoint, "checkpoint")
    params, enc, vocab, _, _ = load_checkpoint(ckpt, cfg.encoder if cfg else None)
    corpus = _load_corpus(args.corpus, "evaluation corpus")
    preds, results = [], []
    for sent in corpus:
        pred, res = predict(sent, vocab, params, enc)
        preds.append(pred)
        results.append(res)
    metrics = score(corpus, preds)
    print(_format_prf("entity", metrics.entity))
    print(_format_prf("relation", metrics.relation))

    if args.rules:
        run = RunConfig(rules=args.rules, schema=args.schema or "")
        schema = _schema_for(run, vocab)
        rules = _load_rules(run, schema)
        views = [NeuralView.from_result(res, vocab, schema) for res in results]
        print("rule violations on predictions:")
        for k, rule in enumerate(rules):
            fired = violated = 0
            for view in views:
                violated += len(rule_violations([rule], view))
                fired += len(deep_logic([rule], view).table.groundings[0])
            print(f"  rule {k}: {violated}/{fired} violated  {serialize([rule]).strip()}")
        if args.dump_groundings:
            with open(args.dump_groundings, "w", encoding="utf-8") as fh:
                for sent, view in zip(corpus, views):
                    dump_groundings(deep_logic(rules, view), view, fh, sent.id)
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    path = _require_file(args.config, "generator config")
    try:
        gen = SyntheticConfig.from_file(path)
    except (ValueError, configparser.Error) as exc:
        raise InputError(f"{path}: {exc}") from None
    if args.seed is not None:
        gen = dataclasses.replace(gen, seed=args.seed)
    if not args.out:
        raise InputError("no output directory: pass --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sentences = generate_synthetic(gen)
    for name, part in zip(("train", "dev", "test"), split_corpus(sentences)):
        write_conll(part, out / f"{name}.conll")
        print(f"{name}: {len(part)} sentences -> {out / f'{name}.conll'}")
    return EXIT_OK


def cmd_inspect_rules(args: argparse.Namespace) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    rules_path = _require_file(args.rules, "ruleset")
    rules = parse_ruleset(rules_path.read_text(encoding="utf-8"))
    _, _, _, weights, _ = load_checkpoint(ckpt)
    if len(weights) != len(rules):
        raise CheckpointError(f"checkpoint holds {len(weights)} rule weights but {rules_path} has {len(rules)} rules")
    for rule, w in zip(rules, weights):
        rule.weight_raw.data[...] = w
    for rule in sorted(rules, key=lambda r: -r.weight):
        print(f"{rule.weight:.6f}\t{serialize([rule]).strip()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logicfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    p.add_argument("--config", help="key-value run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--logic", type=_parse_bool_arg, help="true|false")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-groundings", help="write a grounding trace of the last epoch here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="run config whose encoder shape the checkpoint must match")
    p.add_argument("--rules", help="report rule violations of the predictions")
    p.add_argument("--schema")
    p.add_argument("--dump-groundings", help="write a grounding trace here (needs --rules)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="write synthetic train/dev/test splits")
    p.add_argument("--config", required=True, help="generator config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inspect-rules", help="list learned rule weights, highest first")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", required=True)
    p.set_defaults(func=cmd_inspect_rules)
    return parser


def _parse_bool_arg(raw: str) -> bool:
    try:
        return _parse_bool(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected true or false, got {raw!r}") from None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, CorpusFormatError, RuleSyntaxError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
