"""``plangen <gen|train|eval|dump>``: datasets, training, evaluation, alignment dumps.

Options come from three layers, later ones winning: built-in defaults, a flat
``key=value`` config file (``--config``, ``#`` starts a comment), and command
line flags.  Keys in the file use the flag names with ``_`` or ``-``.

Exit codes: 0 success, 2 user or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .compute import no_grad
from .decode import DecodeResult
from .model import ModelConfig, Seq2SeqModel, forward_nll
from .planner import MODES, PlannerConfig
from .tasks import (
    EOS, Dataset, edge_set_key, gen_copy_task, gen_euler_dataset, is_eulerian_circuit,
    parse_source, read_dataset, split_dataset, write_dataset,
)
from .training import (
    NonFiniteLossError, TrainConfig, Trainer, decode_instance, load_checkpoint, load_model,
    save_checkpoint,
)

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
METRICS_HEADER = ["update", "nll", "commit_penalty", "valid_accuracy", "wall_time"]


class UserError(Exception):
    """Bad input from the command line, a config file or the file system."""


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    # data and files
    train: str | None = None
    valid: str | None = None
    out: str = "run"
    resume: str | None = None
    # model
    mode: str = "pag"
    embed_dim: int = 32
    hidden: int = 64
    enc_hidden: int | None = None
    dec_hidden: int | None = None
    out_hidden: int | None = None
    layers: int = 1
    layer_norm: bool = False
    model_seed: int | None = None
    # planner
    k: int = 10
    lambda_com: float = 1e-3
    gumbel_seed: int = 0
    summary_dim: int = 16
    align_hidden: int = 64
    max_src_len: int | None = None
    dense_switch_grad: bool = False
    # optimisation
    learning_rate: float = 2e-4
    clip_threshold: float = 5.0
    batch_size: int = 1
    max_updates: int = 1000
    seed: int = 0
    eval_interval: int = 1000
    log_interval: int = 100
    checkpoint_interval: int | None = None
    nll_window: int = 100
    target_accuracy: float | None = None
    target_nll: float | None = None
    eval_decoder: str = "greedy"
    beam_width: int = 4

    def validate(self) -> None:
        if self.mode not in MODES:
            raise UserError(f"mode must be one of {', '.join(MODES)}")
        if self.layers not in (1, 2):
            raise UserError("layers must be 1 or 2")
        if self.eval_decoder not in ("greedy", "beam"):
            raise UserError("eval_decoder must be greedy or beam")
        positive = ["embed_dim", "hidden", "k", "summary_dim", "align_hidden", "learning_rate",
                    "clip_threshold", "batch_size", "log_interval", "nll_window", "beam_width"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise UserError(f"{name} must be positive")
        for name in ("enc_hidden", "dec_hidden", "out_hidden", "max_src_len", "checkpoint_interval"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise UserError(f"{name} must be positive")
        if self.max_updates < 0 or self.eval_interval < 0 or self.lambda_com < 0:
            raise UserError("max_updates, eval_interval and lambda_com must be non-negative")

    def model_config(self, dataset: Dataset, longest: int) -> ModelConfig:
        v = dataset.vocab
        planner = PlannerConfig(
            k=self.k, mode=self.mode, lambda_com=self.lambda_com, gumbel_seed=self.gumbel_seed,
            summary_dim=self.summary_dim, align_hidden=self.align_hidden,
            max_src_len=self.max_src_len or max(64, longest), dense_switch_grad=self.dense_switch_grad,
        )
        return ModelConfig(
            src_vocab=len(v), tgt_vocab=len(v), embed_dim=self.embed_dim,
            enc_hidden=self.enc_hidden or self.hidden, dec_hidden=self.dec_hidden or self.hidden,
            out_hidden=self.out_hidden or self.hidden, dec_layers=self.layers, layer_norm=self.layer_norm,
            bos=v.bos, eos=v.eos, pad=v.pad,
            seed=self.seed if self.model_seed is None else self.model_seed, planner=planner,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, clip_threshold=self.clip_threshold, lambda_com=None,
            max_updates=self.max_updates, seed=self.seed, eval_interval=self.eval_interval,
            log_interval=self.log_interval, batch_size=self.batch_size, nll_window=self.nll_window,
            target_accuracy=self.target_accuracy, target_nll=self.target_nll,
            eval_decoder=self.eval_decoder, beam_width=self.beam_width,
        )


def _field_types() -> dict[str, type]:
    out = {}
    for f in fields(RunConfig):
        t = str(f.type)
        out[f.name] = bool if t.startswith("bool") else int if t.startswith("int") else \
            float if t.startswith("float") else str
    return out


def _coerce(name: str, raw: str):
    kind = _field_types()[name]
    if raw.strip().lower() in ("none", ""):
        return None
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise UserError(f"bad value for {name}: {raw!r}") from None


def read_config_file(path: str | Path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UserError(f"cannot read config file {path}: {e.strerror}") from None
    known = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UserError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in values:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers

def _load_dataset(path: str | None, what: str) -> Dataset:
    if not path:
        raise UserError(f"no {what} dataset given")
    if not Path(path).is_file():
        raise UserError(f"{what} dataset not found: {path}")
    try:
        return read_dataset(path)
    except (ValueError, KeyError) as e:
        raise UserError(f"{path}: {e}") from None


def _ensure_dir(path: str | Path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UserError(f"cannot create directory {p}: {e.strerror}") from None
    return p


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as e:
        raise UserError(f"cannot write {path}: {e.strerror}") from None


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


# ---------------------------------------------------------------- gen

def cmd_gen(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    try:
        if args.task == "euler":
            ds = gen_euler_dataset(args.nodes, args.count, rng)
        else:
            ds = gen_copy_task(args.vocab, args.min_len, args.max_len, args.count, rng,
                               reverse=args.task == "reverse")
    except ValueError as e:
        raise UserError(str(e)) from None
    try:
        fractions = [float(x) for x in args.fractions.split(",")]
    except ValueError:
        raise UserError(f"bad --fractions {args.fractions!r}") from None
    if len(fractions) != 3:
        raise UserError("--fractions needs three comma-separated values")
    key = edge_set_key(ds.vocab) if args.task == "euler" and args.split_by == "graph" else None
    try:
        parts = split_dataset(ds, fractions, np.random.default_rng(args.seed + 1), group_key=key)
    except ValueError as e:
        hint = " (try --split-by instance)" if key else ""
        raise UserError(f"{e}{hint}") from None
    out = _ensure_dir(args.out)
    for name, part in zip(("train", "valid", "test"), parts):
        try:
            write_dataset(out / f"{name}.tsv", part)
        except OSError as e:
            raise UserError(f"cannot write {out / name}.tsv: {e.strerror}") from None
    print(f"train={len(parts[0])} valid={len(parts[1])} test={len(parts[2])} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

class MetricsWriter:
    def __init__(self, path: Path, append: bool):
        self.path = path
        if not append or not path.exists():
            _write_text(path, ",".join(METRICS_HEADER) + "\n")

    def __call__(self, row) -> None:
        with open(self.path, "a") as fh:
            fh.write(",".join([str(row.update), _fmt(row.nll), _fmt(row.commit_penalty),
                               _fmt(row.valid_accuracy), f"{row.wall_time:.3f}"]) + "\n")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    train_set = _load_dataset(cfg.train, "training")
    valid_set = _load_dataset(cfg.valid, "validation") if cfg.valid else None
    if valid_set is not None and valid_set.vocab != train_set.vocab:
        raise UserError("training and validation vocabularies differ")
    out = _ensure_dir(cfg.out)
    ckpt = out / "checkpoint.npz"
    tc = cfg.train_config()
    if cfg.resume:
        if not Path(cfg.resume).is_file():
            raise UserError(f"checkpoint not found: {cfg.resume}")
        trainer = load_checkpoint(cfg.resume, train_set, valid_set, tc)
        if trainer.model.config.src_vocab != len(train_set.vocab):
            raise UserError("checkpoint vocabulary does not match the training data")
    else:
        longest = max(len(i.source) for d in (train_set, valid_set) if d for i in d)
        trainer = Trainer(Seq2SeqModel(cfg.model_config(train_set, longest)), train_set, tc, valid_set)
    metrics = MetricsWriter(out / "metrics.csv", append=bool(cfg.resume))
    every = cfg.checkpoint_interval or cfg.eval_interval or cfg.max_updates

    def on_log(row):
        metrics(row)
        print(f"update {row.update} nll {row.nll:.4f} penalty {row.commit_penalty:.5f} "
              f"valid {row.valid_accuracy:.4f}", flush=True)

    try:
        while trainer.update < cfg.max_updates and not trainer.log.stopped_early:
            target = min(cfg.max_updates, (trainer.update // every + 1) * every) if every else cfg.max_updates
            trainer.run(max_updates=target, on_log=on_log)
            save_checkpoint(ckpt, trainer)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, trainer)
    print(f"checkpoint -> {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _load_for_data(path: str, data: Dataset) -> Seq2SeqModel:
    if not Path(path).is_file():
        raise UserError(f"checkpoint not found: {path}")
    try:
        model, meta, _ = load_model(path)
    except (ValueError, KeyError, OSError) as e:
        raise UserError(f"cannot load checkpoint {path}: {e}") from None
    vocab = meta.get("vocab")
    if vocab is not None and tuple(vocab) != data.vocab.tokens:
        raise UserError("checkpoint vocabulary does not match the dataset vocabulary")
    if vocab is None and model.config.src_vocab != len(data.vocab):
        raise UserError("checkpoint vocabulary size does not match the dataset")
    return model


def valid_circuit(data: Dataset, source: Sequence[int], tokens: Sequence[int]) -> bool:
    """True iff the decoded tokens form some Eulerian circuit of the source graph."""
    words = data.vocab.decode(tokens)
    if not words or words[-1] != EOS:
        return False
    try:
        walk = [int(w) for w in words[:-1]]
        g, start = parse_source(data.vocab, source)
    except ValueError:
        return False
    return is_eulerian_circuit(g, walk, start)


def cmd_eval(args: argparse.Namespace) -> int:
    data = _load_dataset(args.data, "evaluation")
    model = _load_for_data(args.checkpoint, data)
    decoder = "beam" if args.beam else "greedy"
    rows, hits, valid = [], 0, 0
    for inst in data:
        out = decode_instance(model, inst.source, decoder, args.beam or 1)
        exact = out.tokens == list(inst.target)
        ok = valid_circuit(data, inst.source, out.tokens) if data.kind == "euler" else exact
        hits += exact
        valid += ok
        v = data.vocab
        rows.append([str(inst.id), " ".join(v.decode(inst.source)), " ".join(v.decode(inst.target)),
                     " ".join(v.decode(out.tokens)), str(int(exact)), str(int(ok))])
    n = max(len(data), 1)
    print(f"exact_match_accuracy {hits / n:.6f} ({hits}/{len(data)})")
    if data.kind == "euler":
        print(f"valid_circuit_accuracy {valid / n:.6f} ({valid}/{len(data)})")
    if args.out:
        lines = ["id\tsource\ttarget\tprediction\texact\tvalid"] + ["\t".join(r) for r in rows]
        _write_text(Path(args.out), "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- dump

def parse_selector(selector: str, count: int) -> list[int]:
    """``all``, or comma-separated indices and ``a-b`` ranges (inclusive)."""
    if selector.strip() == "all":
        return list(range(count))
    picked: list[int] = []
    try:
        for part in selector.split(","):
            part = part.strip()
            if "-" in part:
                a, b = (int(x) for x in part.split("-", 1))
                picked.extend(range(a, b + 1))
            elif part:
                picked.append(int(part))
    except ValueError:
        raise UserError(f"bad instance selector {selector!r}") from None
    return [i for i in dict.fromkeys(picked) if 0 <= i < count]


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Plain (ASCII) graymap, one pixel per cell: 0 -> white, 1 -> black."""
    h, w = values.shape
    pix = np.rint(255 * (1.0 - np.clip(values, 0.0, 1.0))).astype(int)
    body = "\n".join(" ".join(str(x) for x in row) for row in pix)
    _write_text(path, f"P2\n{w} {h}\n255\n{body}\n")


def read_pgm(path: str | Path) -> np.ndarray:
    toks = Path(path).read_text().split()
    if toks[0] != "P2":
        raise ValueError("not a plain graymap")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    return np.array([int(t) for t in toks[4:4 + w * h]]).reshape(h, w) / maxval


def _dump_one(out: Path, stem: str, data: Dataset, source, result: DecodeResult) -> None:
    v = data.vocab
    src = v.decode(source)
    tgt = v.decode(result.tokens)
    align = result.alignments
    with open(out / f"{stem}_alignments.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target\\source", *src])
        for tok, row in zip(tgt, align):
            w.writerow([tok, *(repr(float(x)) for x in row)])
    write_pgm(out / f"{stem}_alignments.pgm", align)
    with open(out / f"{stem}_commitments.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "target", "g"])
        for t, (tok, g) in enumerate(zip(tgt, result.switches), 1):
            w.writerow([t, tok, g])
    plans = [(t, p) for t, p in enumerate(result.plans, 1) if p is not None]
    if plans:
        with open(out / f"{stem}_plans.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "row", *src])
            for t, plan in plans:
                for i, row in enumerate(plan):
                    w.writerow([t, i, *(repr(float(x)) for x in row)])


def _teacher_forced(model: Seq2SeqModel, source, target) -> DecodeResult:
    with no_grad():
        res = forward_nll(model, source, target)
    return DecodeResult(list(target), -res.loss.item() * len(target), True, np.vstack(res.alignments),
                        res.switches, res.plans)


def cmd_dump(args: argparse.Namespace) -> int:
    data = _load_dataset(args.data, "dump")
    model = _load_for_data(args.checkpoint, data)
    chosen = parse_selector(args.select, len(data))
    if not chosen:
        raise UserError(f"selector {args.select!r} matches no instance")
    out = _ensure_dir(args.out)
    for idx in chosen:
        inst = data[idx]
        if args.teacher_forcing:
            result = _teacher_forced(model, inst.source, inst.target)
        else:
            result = decode_instance(model, inst.source, "greedy", max_len=args.max_len)
        _dump_one(out, f"instance{inst.id}", data, inst.source, result)
    print(f"dumped {len(chosen)} instance(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    for name, kind in _field_types().items():
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=name, type=kind, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None, help="alias of --learning-rate")
    p.add_argument("--clip", dest="clip_threshold", type=float, default=None, help="alias of --clip-threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plangen", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate train/valid/test dataset files")
    g.add_argument("task", choices=["euler", "copy", "reverse"])
    g.add_argument("--nodes", type=int, default=7)
    g.add_argument("--vocab", type=int, default=8)
    g.add_argument("--min-len", type=int, default=3)
    g.add_argument("--max-len", type=int, default=10)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fractions", default="0.8,0.1,0.1")
    g.add_argument("--split-by", choices=["graph", "instance"], default="graph",
                   help="euler only: keep graphs with the same edge set in one split")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a dataset and report accuracy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    dec = e.add_mutually_exclusive_group()
    dec.add_argument("--greedy", action="store_true")
    dec.add_argument("--beam", type=int, default=0, metavar="WIDTH")
    e.add_argument("--out", help="per-instance results file (TSV)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump", help="export alignment CSV/heatmaps, plans and commitment traces")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--select", default="0", help="'all', indices and ranges, e.g. 0,3,5-7")
    d.add_argument("--max-len", type=int, default=None)
    d.add_argument("--teacher-forcing", action="store_true",
                   help="follow the reference target instead of greedy decoding")
    d.add_argument("--out", default="dump")
    d.set_defaults(func=cmd_dump)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "beam", 0) and args.beam < 0:
        parser.error("--beam must be positive")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    if args.command == "train":
        print(f"done in {time.perf_counter() - t0:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
