"""Command-line runs: ``cigf SUBCOMMAND --out DIR [--config FILE] [section.key=value ...]``.

Configuration is a flat ``section.key=value`` text file; positional
overrides win over file values. Every run writes its outputs plus a
``manifest.txt`` that is itself a valid config file, so feeding it back
with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import collections.abc
import dataclasses
import hashlib
import logging
import os
import sys
import tempfile
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, analysis
from .cigcn import CigcnConfig, attention_report, propagate
from .mbgraph import DatasetError, SynthConfig, label_cooccurrence, leave_one_out_split, load_dataset, save_dataset, synth_generate
from .mesi import ConfigError, HeadConfig
from .train import DivergenceError, TrainConfig, fit

log = logging.getLogger(__name__)

SUBCOMMANDS = ("train", "eval", "ablate", "attention", "conflict", "cooccur", "synth", "timing")
VARIANTS = ("base", "wo-cigcn", "wo-mesi", "full")
THREADS_ENV = "CIGF_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


@dataclass
class DataSection:
    # dataset file; when unset the synth section generates one
    path: str | None = None


@dataclass
class SplitSection:
    seed: int = 0
    # sampled negatives per test user; none ranks against every unseen item
    negatives: int | None = 99


@dataclass
class HeadSection:
    kind: str = "mesi"
    shared_gate: bool = False


@dataclass
class RunSection:
    variant: str = "full"
    # ablate repeats each variant with split and train seeds offset by 0..n_seeds-1
    n_seeds: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")


@dataclass
class AnalysisSection:
    n: int = 10
    tie_break: str = "index"
    top: int = 3
    boundaries: tuple[float, ...] | None = None
    n_groups: int = 6
    min_degree: int | None = None
    # interactions kept per user before training in `conflict`; no default count
    subsample: int | None = None
    conflict_samples: int = 100
    conflict_loss: str = "bpr"


SECTIONS = {
    "data": DataSection,
    "synth": SynthConfig,
    "split": SplitSection,
    "train": TrainConfig,
    "cigcn": CigcnConfig,
    "head": HeadSection,
    "run": RunSection,
    "analysis": AnalysisSection,
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.sections[name]
        except KeyError:
            raise AttributeError(name) from None

    def text(self) -> str:
        lines = []
        for name, obj in self.sections.items():
            for f in dataclasses.fields(obj):
                lines.append(f"{name}.{f.name}={_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def models(self, variant: str | None = None) -> tuple[CigcnConfig, HeadConfig]:
        variant = variant or self.run.variant
        cc = self.cigcn
        hc = HeadConfig(self.head.kind, self.head.shared_gate)
        if variant in ("wo-cigcn", "base"):
            cc = replace(cc, compress=False)
        if variant in ("wo-mesi", "base"):
            hc = HeadConfig("bilinear")
        return cc, hc


# config parsing -------------------------------------------------------------


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(text: str, tp):
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _convert(text, a)
            except ValueError:
                pass
        raise ValueError(f"cannot parse {text!r}")
    if origin is typing.Literal:
        if text not in args:
            raise ValueError(f"{text!r} not one of {args}")
        return text
    if origin in (tuple, collections.abc.Sequence):
        return tuple(_convert(t.strip(), args[0]) for t in text.split(","))
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp in (int, float, str):
        return tp(text)
    raise ValueError(f"unsupported field type {tp}")


def parse_pairs(lines, source: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def build_config(pairs: dict[str, str]) -> RunConfig:
    by_section: dict[str, dict] = {name: {} for name in SECTIONS}
    for key, value in pairs.items():
        section, _, name = key.partition(".")
        if section == "meta":
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section in {key!r}")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if name not in {f.name for f in dataclasses.fields(cls)} or name == "frozen_gates":
            raise ConfigError(f"unknown config key {key!r}")
        try:
            by_section[section][name] = _convert(value, hints[name])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    sections = {}
    for name, cls in SECTIONS.items():
        try:
            sections[name] = cls(**by_section[name])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid {name} section: {e}") from None
    return RunConfig(sections)


def load_config(path, overrides=()) -> RunConfig:
    pairs = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        pairs.update(parse_pairs(text.splitlines(), str(path)))
    pairs.update(parse_pairs(overrides, "command line"))
    return build_config(pairs)


# output handling --------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class OutputLock:
    """One run per output directory, enforced with an exclusive lock file."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory is locked by another run ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _csv(header: str, rows) -> str:
    return "\n".join([header, *(",".join(_cell(v) for v in r) for r in rows)]) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# subcommands --------------------------------------------------------------------


def _dataset(cfg: RunConfig):
    if cfg.data.path is not None:
        return load_dataset(cfg.data.path)
    return synth_generate(cfg.synth)


def _split(cfg: RunConfig, g, offset: int = 0):
    return leave_one_out_split(g, cfg.split.seed + offset, cfg.split.negatives)


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    g = synth_generate(cfg.synth)
    fd, tmp = tempfile.mkstemp(dir=out, suffix=".tmp")
    os.close(fd)
    try:
        save_dataset(g, tmp)
        text = Path(tmp).read_text()
    finally:
        os.unlink(tmp)
    return {"dataset.txt": text}


def cmd_cooccur(cfg: RunConfig, out: Path) -> dict:
    counts = label_cooccurrence(_dataset(cfg))
    return {"cooccur.csv": _csv("pattern,count", sorted(counts.items()))}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    cc, hc = cfg.models()
    res = fit(_split(cfg, _dataset(cfg)), cfg.train, hc, cc)
    # seconds go to the timing command so the trace stays reproducible
    rows = [(r.epoch, float(r.loss), float(r.hr10), float(r.ndcg10)) for r in res.trace]
    return {"trace.csv": _csv("epoch,loss,hr10,ndcg10", rows)}


def cmd_timing(cfg: RunConfig, out: Path) -> dict:
    cc, hc = cfg.models()
    res = fit(_split(cfg, _dataset(cfg)), cfg.train, hc, cc, evaluate=False)
    return {"timing.csv": _csv("epoch,seconds", [(r.epoch, float(r.seconds)) for r in res.trace[1:]])}


def _evaluate(cfg, split, params, hc, cc):
    a = cfg.analysis
    return analysis.evaluate(split, params, hc, cc, n=a.n, tie_break=a.tie_break, seed=cfg.split.seed)


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    cc, hc = cfg.models()
    split = _split(cfg, _dataset(cfg))
    res = fit(split, cfg.train, hc, cc, evaluate=False)
    ev = _evaluate(cfg, split, res.params, hc, cc)
    n = cfg.analysis.n
    return {
        "metrics.csv": _csv(f"users,hr{n},ndcg{n}", [(len(ev.result), ev.hr, ev.ndcg)]),
        "ranks.csv": "\n".join(ev.result.lines()) + "\n",
    }


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    g = _dataset(cfg)
    n = cfg.analysis.n
    rows = []
    for variant in VARIANTS:
        cc, hc = cfg.models(variant)
        hrs, nds = [], []
        for s in range(cfg.run.n_seeds):
            split = _split(cfg, g, s)
            res = fit(split, replace(cfg.train, seed=cfg.train.seed + s), hc, cc, evaluate=False)
            ev = _evaluate(cfg, split, res.params, hc, cc)
            hrs.append(ev.hr)
            nds.append(ev.ndcg)
        rows.append((variant, float(np.mean(hrs)), float(np.mean(nds))))
        log.info("%s: hr %.4f ndcg %.4f", *rows[-1])
    return {"ablation.csv": _csv(f"variant,hr{n},ndcg{n}", rows)}


def cmd_attention(cfg: RunConfig, out: Path) -> dict:
    cc, hc = cfg.models()
    if not cc.compress or cc.n_layers < 2:
        raise ConfigError("attention needs graph compression and at least two layers")
    split = _split(cfg, _dataset(cfg))
    res = fit(split, cfg.train, hc, cc, evaluate=False)
    rows = attention_report(split.train, res.params, cc, top=cfg.analysis.top)
    return {"attention.csv": _csv("order,relation,score,rank", rows)}


def cmd_conflict(cfg: RunConfig, out: Path) -> dict:
    a = cfg.analysis
    cc, hc = cfg.models()
    split = _split(cfg, _dataset(cfg))
    if a.subsample is not None:
        sub = analysis.subsample_interactions(split.train, a.subsample, seed=cfg.split.seed)
        split = replace(split, train=sub)
    g = split.train
    res = fit(split, cfg.train, hc, cc, evaluate=False)
    ev = _evaluate(cfg, split, res.params, hc, cc)

    groups = analysis.group_users(g, a.boundaries, a.n_groups, min_degree=a.min_degree)
    rank_of = dict(zip(ev.result.users.tolist(), ev.result.ranks.tolist()))
    metrics = []
    for grp in groups:
        ranks = [rank_of[u] for u in grp.users if u in rank_of]
        metrics.append((analysis.hr_at_n(ranks, a.n), analysis.ndcg_at_n(ranks, a.n)) if ranks else (np.nan, np.nan))

    reps = propagate(g, res.params, cc)
    pairs = g.pairs(g.target_index)
    rng = np.random.default_rng(cfg.split.seed)
    pick = np.sort(rng.choice(len(pairs), size=min(a.conflict_samples, len(pairs)), replace=False))
    sums: dict = {}
    for u, i in pairs[pick]:
        seen = set(g.target.row(u)[0].tolist())
        if len(seen) >= g.n_items:
            continue
        neg = int(rng.integers(g.n_items))
        while neg in seen:
            neg = int(rng.integers(g.n_items))
        labels = [float(g.has(k, [u], [i])[0]) for k in range(g.n_behaviors)]
        rep = analysis.conflict_report(hc, res.params, reps, int(u), int(i), labels, loss=a.conflict_loss, neg_item=neg)
        for key, c in rep.cosines.items():
            if c is not None:
                sums.setdefault(key, []).append(c)
    K = g.n_behaviors
    rows = []
    for j, (s, t) in enumerate((s, t) for s in range(K) for t in range(s + 1, K)):
        vals = sums.get((s, t), [])
        rows.append((j, s, t, float(np.mean(vals)) if vals else ""))
    return {
        "groups.csv": "\n".join(analysis.group_lines(groups, metrics)) + "\n",
        "conflict.csv": _csv("pair,s,t,cosine", rows),
    }


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "attention": cmd_attention,
    "conflict": cmd_conflict,
    "cooccur": cmd_cooccur,
    "synth": cmd_synth,
    "timing": cmd_timing,
}


# entry point ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cigf", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--config", type=Path, help="key=value config file (a previous manifest works too)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="section.key=value")
    return p


def _threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(command: str, cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        files = COMMANDS[command](cfg, out)
        for name, text in files.items():
            write_atomic(out / name, text)
        meta = [
            f"meta.command={command}",
            f"meta.version={__version__}",
            f"meta.config_hash={cfg.digest()}",
        ]
        write_atomic(out / "manifest.txt", cfg.text() + "\n".join(meta) + "\n")


def main(argv=None) -> int:
    try:
        args = _parser().parse_intermixed_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = load_config(args.config, args.overrides)
        limits = _threads()
        try:
            run(args.command, cfg, args.out)
        finally:
            if limits is not None:
                limits.unregister()
    except ConfigError as e:
        print(f"cigf: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"cigf: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, OSError, RuntimeError, ValueError) as e:
        print(f"cigf: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
