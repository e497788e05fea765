"""Command-line entry point.

A run is a directory holding ``config.txt`` and the generated corpus; every
phase writes into its own subdirectory and refuses to overwrite an existing
one. Run names resolve against ``$BRCSGAN_RUNS`` (default ``./runs``) unless
they contain a path separator.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .bleu import corpus_bleu
from .config import ConfigError, ExperimentConfig, parse_config, parse_text, serialize
from .corpus import Corpus, Vocab, generate_corpus, read_parallel, read_sentences, write_parallel, write_sentences
from .discriminator import Discriminator
from .generator import Generator
from .numerics import load_checkpoint
from .trainer import (
    GateNotReached,
    adversarial_loop,
    decode_corpus,
    disc_pools,
    mrt_baseline,
    pretrain_discriminator,
    pretrain_generator,
    read_metrics,
    run_sweeps,
)

log = logging.getLogger("brcsgan")

SPLITS = ("train", "dev", "test")


class CliError(RuntimeError):
    pass


def runs_root() -> Path:
    return Path(os.environ.get("BRCSGAN_RUNS", "runs"))


def resolve_run(name: str) -> Path:
    p = Path(name)
    return p if (os.sep in name or p.is_absolute()) else runs_root() / name


# ---------------------------------------------------------------- helpers


def load_run(run: Path, overrides: dict[str, str] | None = None) -> tuple[ExperimentConfig, Corpus]:
    if not (run / "config.txt").exists():
        raise CliError(f"{run}: not a run directory (missing config.txt; run gen-data first)")
    cfg = parse_config(run / "config.txt", overrides)
    vocab = Vocab.load(run / "data" / "vocab.txt")
    splits = {s: read_parallel(run / "data" / f"{s}.src", run / "data" / f"{s}.tgt", vocab) for s in SPLITS}
    return cfg, Corpus(splits["train"], splits["dev"], splits["test"], vocab)


def new_phase_dir(run: Path, name: str, cfg: ExperimentConfig) -> Path:
    out = run / name
    if out.exists():
        raise CliError(f"{out} already exists; phase outputs are never overwritten")
    out.mkdir(parents=True)
    (out / "config.txt").write_text(serialize(cfg))
    return out


def require(path: Path, phase: str) -> Path:
    if not path.exists():
        raise CliError(f"missing prerequisite: {phase} has not been run ({path} not found)")
    return path


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _generator(cfg: ExperimentConfig, entries=None) -> Generator:
    g = Generator(cfg.generator_config())
    if entries is not None:
        g.load_state_dict(entries)
    return g


def _discriminator(cfg: ExperimentConfig, entries=None) -> Discriminator:
    d = Discriminator(cfg.discriminator_config())
    if entries is not None:
        d.load_state_dict(entries)
    return d


# ------------------------------------------------------------ subcommands


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config, _overrides(args.set)) if args.config else parse_text("", _overrides(args.set))
    run = resolve_run(args.run)
    if run.exists():
        raise CliError(f"{run} already exists; run directories are never overwritten")
    corpus = generate_corpus(cfg.corpus)
    (run / "data").mkdir(parents=True)
    (run / "config.txt").write_text(serialize(cfg))
    corpus.vocab.save(run / "data" / "vocab.txt")
    for split in SPLITS:
        write_parallel(getattr(corpus, split), run / "data" / f"{split}.src", run / "data" / f"{split}.tgt",
                       corpus.vocab)
    print(f"wrote {run}: {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} pairs")
    return 0


def cmd_pretrain_gen(args) -> int:
    run = resolve_run(args.run)
    cfg, corpus = load_run(run, _overrides(args.set))
    out = new_phase_dir(run, args.name or "gen-pretrain", cfg)
    res = pretrain_generator(_generator(cfg), corpus, cfg.train_config(), out)
    print(f"best dev BLEU {res.state.best_bleu:.4f} at step {res.state.best_step}")
    return 0


def _pretrained_gen_entries(run: Path, source: str) -> dict:
    return load_checkpoint(require(run / source / "gen_pretrained.ckpt", "pretrain-gen"))


def cmd_pretrain_disc(args) -> int:
    run = resolve_run(args.run)
    cfg, corpus = load_run(run, _overrides(args.set))
    entries = _pretrained_gen_entries(run, args.gen)
    out = new_phase_dir(run, args.name or "disc-pretrain", cfg)
    tcfg = cfg.train_config()
    gen = _generator(cfg, entries)
    real, fake = disc_pools(gen, corpus, tcfg)
    try:
        res = pretrain_discriminator(_discriminator(cfg), real, fake, tcfg.xi, tcfg, out)
    except GateNotReached as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"discriminator accuracy {res.accuracy:.4f} after {res.state.step} steps")
    return 0


def cmd_train_gan(args) -> int:
    run = resolve_run(args.run)
    cfg, corpus = load_run(run, _overrides(args.set))
    g_entries = _pretrained_gen_entries(run, args.gen)
    d_entries = load_checkpoint(require(run / args.disc / "disc_pretrained.ckpt", "pretrain-disc"))
    out = run / (args.name or "adversarial")
    if args.resume:
        require(out / "state.ckpt", "train-gan")
    else:
        out = new_phase_dir(run, args.name or "adversarial", cfg)
    res = adversarial_loop(_generator(cfg, g_entries), _discriminator(cfg, d_entries), corpus,
                           cfg.train_config(), out, resume=args.resume)
    print(f"best dev BLEU {res.state.best_bleu:.4f} at step {res.state.best_step} ({res.state.step} steps)")
    return 0


def cmd_train_mrt(args) -> int:
    run = resolve_run(args.run)
    cfg, corpus = load_run(run, _overrides(args.set))
    entries = _pretrained_gen_entries(run, args.gen)
    out = new_phase_dir(run, args.name or "mrt", cfg)
    res = mrt_baseline(_generator(cfg, entries), corpus, cfg.train_config(), out)
    print(f"best dev BLEU {res.state.best_bleu:.4f} at step {res.state.best_step}")
    return 0


def _sweep(args, kind: str) -> int:
    run = resolve_run(args.run)
    cfg, corpus = load_run(run, _overrides(args.set))
    entries = _pretrained_gen_entries(run, args.gen)
    grid = [float(x) if kind == "xi" else int(x) for x in args.grid.split(",")] if args.grid else None
    out = run / (args.name or f"sweep-{kind}")
    if out.exists():
        raise CliError(f"{out} already exists; phase outputs are never overwritten")
    d_entries = None
    if kind == "n" and args.disc:
        d_entries = load_checkpoint(require(run / args.disc / "disc_pretrained.ckpt", "pretrain-disc"))
    rows = run_sweeps(kind, entries, lambda: _generator(cfg), lambda: _discriminator(cfg), corpus,
                      cfg.train_config(), out, grid, d_entries)
    (out / "config.txt").write_text(serialize(cfg))
    for r in rows:
        print(f"{kind}={r['value']}: best dev BLEU {r['best_dev_bleu']:.4f}")
    return 0


def cmd_decode(args) -> int:
    run = resolve_run(args.run)
    cfg = parse_config(require(run / "config.txt", "gen-data"))
    vocab = Vocab.load(run / "data" / "vocab.txt")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_absolute():
        ckpt = run / ckpt  # relative paths name a file inside the run
    gen = _generator(cfg, load_checkpoint(require(ckpt, "checkpoint")))
    sources = [s for s in read_sentences(args.input, vocab)]
    if any(not s for s in sources):
        raise CliError(f"{args.input}: empty source line")
    hyps = decode_corpus(gen, sources, "beam" if args.beam > 1 else "greedy", args.beam)
    write_sentences(args.output, hyps, vocab)
    return 0


def cmd_evaluate(args) -> int:
    hyp_lines = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    ref_lines = Path(args.ref).read_text(encoding="utf-8").splitlines()
    if len(hyp_lines) != len(ref_lines):
        raise CliError(f"line count mismatch: {len(hyp_lines)} hypotheses vs {len(ref_lines)} references")
    # map tokens to ids through a vocabulary built from both files
    table: dict[str, int] = {}

    def ids(line: str) -> list[int]:
        return [table.setdefault(t, 4 + len(table)) for t in line.split()]

    hyps = [ids(h) for h in hyp_lines]
    refs = [ids(r) for r in ref_lines]
    print(f"BLEU = {corpus_bleu(hyps, refs).value:.4f}")
    return 0


def cmd_report(args) -> int:
    txt = emit_report(resolve_run(args.run))
    print(txt.read_text(), end="")
    return 0


# ----------------------------------------------------------------- report


def _best(rows: list[dict[str, str]]) -> tuple[float | None, int | None]:
    evals = [(float(r["dev_bleu"]), int(r["step"])) for r in rows if r["dev_bleu"]]
    if not evals:
        return None, None
    best = max(evals, key=lambda e: (e[0], -e[1]))
    return best


def emit_report(run: Path) -> Path:
    """Summarise every metrics.csv under ``run`` into report.txt and report.csv."""
    files = sorted(run.rglob("metrics.csv")) if run.is_dir() else []
    if not files:
        raise CliError(f"{run}: no metrics.csv found")
    table = []
    for f in files:
        rows = read_metrics(f)
        best, step = _best(rows)
        phases = sorted({r["phase"] for r in rows})
        last = max((int(r["step"]) for r in rows), default=0)
        table.append({"config": str(f.parent.relative_to(run)) or ".", "phase": "+".join(phases),
                      "best_dev_bleu": "" if best is None else f"{best:.6f}",
                      "best_step": "" if step is None else step, "last_step": last})
    with open(run / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    width = max(len(r["config"]) for r in table)
    lines = [f"{'config':<{width}}  {'phase':<14} {'best_dev_bleu':>13} {'best_step':>9} {'last_step':>9}"]
    for r in table:
        lines.append(f"{r['config']:<{width}}  {r['phase']:<14} {r['best_dev_bleu']:>13} "
                     f"{str(r['best_step']):>9} {r['last_step']:>9}")
    for summary in sorted(run.rglob("summary.csv")):
        with open(summary, newline="") as fh:
            srows = list(csv.DictReader(fh))
        if not srows:
            continue
        kind = srows[0]["kind"]
        lines.append("")
        lines.append(f"sweep over {kind} ({summary.parent.relative_to(run)}), "
                     f"pretrained baseline {float(srows[0]['baseline_dev_bleu']):.4f}")
        lines.append(f"{kind:>6} {'best_dev_bleu':>13} {'disc_accuracy':>13}")
        for r in srows:
            acc = f"{float(r['disc_accuracy']):.4f}" if r["disc_accuracy"] else "-"
            lines.append(f"{r['value']:>6} {float(r['best_dev_bleu']):>13.4f} {acc:>13}")
    out = run / "report.txt"
    out.write_text("\n".join(lines) + "\n")
    return out


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="brcsgan", description="BLEU-reinforced conditional sequence GAN on synthetic tasks")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "create a run directory with a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--run", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    for name, fn, help_ in (("pretrain-gen", cmd_pretrain_gen, "MLE pretraining of the generator"),
                            ("pretrain-disc", cmd_pretrain_disc, "accuracy-gated discriminator pretraining"),
                            ("train-gan", cmd_train_gan, "adversarial training"),
                            ("train-mrt", cmd_train_mrt, "minimum-risk training baseline"),
                            ("sweep-xi", lambda a: _sweep(a, "xi"), "sweep the discriminator gate"),
                            ("sweep-n", lambda a: _sweep(a, "n"), "sweep the rollout count")):
        p = add(name, fn, help_)
        p.add_argument("--run", required=True)
        p.add_argument("--name", help="output subdirectory (default: the phase name)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name != "pretrain-gen":
            p.add_argument("--gen", default="gen-pretrain", help="generator pretraining subdirectory")
        if name in ("train-gan", "sweep-n"):
            p.add_argument("--disc", default="disc-pretrain" if name == "train-gan" else None)
        if name == "train-gan":
            p.add_argument("--resume", action="store_true")
        if name.startswith("sweep"):
            p.add_argument("--grid", help="comma-separated grid values")

    p = add("decode", cmd_decode, "translate a file of source sentences")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", default="gen-pretrain/gen_pretrained.ckpt")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=1)

    p = add("evaluate", cmd_evaluate, "corpus BLEU of a hypothesis file against a reference file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)

    p = add("report", cmd_report, "summarise the metrics of a run directory")
    p.add_argument("--run", required=True)
    return ap


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (CliError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
