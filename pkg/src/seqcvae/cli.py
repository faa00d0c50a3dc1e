"""Command line entry point: ``seqcvae <subcommand> [options]``.

Exit status is 0 on success, 1 on usage errors (bad flags, bad config) and 2
on runtime failures (unreadable inputs, corrupt checkpoints, divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .corpus import Dataset, SceneGrammar, build_vocab, default_grammar, generate_synthetic, load_jsonl, split
from .diagnostics import toy_gradcheck
from .evaluation import dump_report, evaluate_captions, ngram_histograms, rank_by_consensus, write_histograms_csv
from .rngs import substream
from .sampler import export_latent_means, interpolate, read_sample_sets, sample_dataset, write_sample_sets
from .trainer import TrainingDivergedError, model_from_checkpoint, params_digest, pretrain_backward_lm, train, write_metrics_csv

log = logging.getLogger("seqcvae")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON run config (sections: corpus, train, sample, evaluate, interpolate, export, gradcheck)")
    p.add_argument("--seed", type=int, help="root seed; overrides the config")
    p.add_argument("--variant", help="model variant; overrides train.variant")
    p.add_argument("--k", type=int, help="captions per condition; overrides sample.k")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqcvae", description="Sequential conditional VAE for diverse captioning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate a synthetic scene corpus and its splits")
    _common(p)
    p.add_argument("--grammar", help="grammar JSON (default: built-in scene grammar)")

    p = sub.add_parser("pretrain-blm", help="pretrain the backward language model")
    _common(p)
    p.add_argument("--data", required=True, help="corpus directory with train.jsonl")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", required=True, help="corpus directory with train.jsonl (val.jsonl used for logging)")
    p.add_argument("--blm", help="backward LM checkpoint (pretrained in-process when absent)")
    p.add_argument("--save-every-eval", action="store_true", help="keep a checkpoint at every logged step")

    p = sub.add_parser("sample", help="sample K captions per condition")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--temperature", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("interpolate", help="decode along lines between sampled latent trajectories")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True, help="samples.jsonl written by 'sample'")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS)

    p = sub.add_parser("evaluate", help="accuracy and diversity report for a samples file")
    _common(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--workers", type=int, help="accepted for symmetry with 'sample'; scoring is single-threaded")

    p = sub.add_parser("export-latents", help="CSV of intention-model means per generated word")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients on a toy model")
    _common(p, out_required=False)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    return cfg.override(seed=args.seed, variant=args.variant, k=args.k, workers=getattr(args, "workers", None))


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(data_dir, name: str) -> Dataset:
    path = Path(data_dir) / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return load_jsonl(path)


def _metadata(command: str, cfg: RunConfig) -> dict:
    return {"command": command, "seed": cfg.seed, "created_unix": time.time()}


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_config_for(cfg: RunConfig, data: Dataset):
    """Fill the condition width from the data when the config left it at its default."""
    tc = cfg.train
    if data.feature_dim is not None and tc.cond_dim != data.feature_dim:
        d = tc.to_dict()
        d["cond_dim"] = data.feature_dim
        tc = type(tc).from_dict(d)
    return tc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args, cfg: RunConfig) -> None:
    c = cfg["corpus"]
    if args.grammar:
        grammar = SceneGrammar.load(args.grammar)
    elif c["grammar"]:
        grammar = SceneGrammar.load(c["grammar"])
    else:
        grammar = default_grammar(c["feature_dim"], c["noise"])
    out = _outdir(args.out)
    ds = generate_synthetic(grammar, c["n_scenes"], c["captions_per_scene"], seed=cfg.seed)
    parts = split(ds, c["ratios"], seed=cfg.seed)
    for name, part in zip(SPLITS, parts):
        part.to_jsonl(out / f"{name}.jsonl")
    _write_json(grammar.to_dict(), out / "grammar.json")
    cfg.dump(out / "config.json")
    print(f"wrote {len(ds)} scenes ({', '.join(f'{n}={len(p)}' for n, p in zip(SPLITS, parts))}) to {out}")


def cmd_pretrain_blm(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    data = _load_split(args.data, "train")
    vocab = build_vocab(data)
    tc = _train_config_for(cfg, data)
    res = pretrain_backward_lm(data, vocab, tc)
    save_checkpoint(res.checkpoint, out / "blm.sqcv")
    with open(out / "blm_losses.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(res.losses):
            fh.write(f"{i},{v!r}\n")
    cfg.dump(out / "config.json")
    print(f"backward LM: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f} (ln|V| = {np.log(len(vocab)):.4f})")


def cmd_train(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    data = _load_split(args.data, "train")
    val_path = Path(args.data) / "val.jsonl"
    val = load_jsonl(val_path) if val_path.exists() else None
    vocab = build_vocab(data)
    tc = _train_config_for(cfg, data)
    if args.blm:
        blm = load_checkpoint(args.blm)
        if blm.kind != "blm":
            raise CheckpointError(f"{args.blm} is a {blm.kind!r} checkpoint, expected 'blm'")
        if blm.vocab != vocab.to_dict():
            raise CheckpointError(f"{args.blm} was trained with a different vocabulary")
    else:
        blm = pretrain_backward_lm(data, vocab, tc).checkpoint
        save_checkpoint(blm, out / "blm.sqcv")
    ckpt_dir = None
    if args.save_every_eval:
        ckpt_dir = _outdir(out / "checkpoints")
    res = train(data, vocab, tc, blm, val, checkpoint_dir=ckpt_dir, log_path=out / "metrics.csv")
    save_checkpoint(res.checkpoint, out / "model.sqcv")
    resolved = RunConfig.from_dict({**cfg.to_dict(), "train": tc.to_dict()})
    resolved.dump(out / "config.json")
    last = res.metrics[-1]
    print(f"trained {tc.variant} for {tc.max_steps} steps: recon {last['recon']:.3f} kl {last['kl']:.3f}; params {params_digest(res.checkpoint.params)[:12]}")


def cmd_sample(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    s = dict(cfg["sample"])
    if args.split:
        s["split"] = args.split
    if args.temperature is not None:
        s["temperature"] = args.temperature
    model, vocab, _ = model_from_checkpoint(load_checkpoint(args.model))
    data = _load_split(args.data, s["split"])
    sets = sample_dataset(model, data, s["k"], s["temperature"], s["max_len"], cfg.seed, s["mean_mode"], s["workers"], vocab)
    write_sample_sets(sets, vocab, out / "samples.jsonl", out / "trajectories.sqcv")
    cfg.dump(out / "config.json")
    print(f"sampled {s['k']} captions for {len(sets)} conditions -> {out / 'samples.jsonl'}")


def cmd_interpolate(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    icfg = cfg["interpolate"]
    model, vocab, _ = model_from_checkpoint(load_checkpoint(args.model))
    objs, trajs = read_sample_sets(args.samples)
    data = _load_split(args.data, args.split or cfg["sample"]["split"])
    rng = substream(cfg.seed, "interpolate")
    rows = []
    usable = [o for o in objs if len(trajs.get(o["cond_id"], [])) >= 2]
    if not usable:
        raise ValueError("samples file has no condition with two or more trajectories")
    for p in range(icfg["pairs"]):
        obj = usable[int(rng.integers(len(usable)))]
        cid = obj["cond_id"]
        i, j = rng.choice(len(trajs[cid]), size=2, replace=False)
        res = interpolate(model, data.features[cid], trajs[cid][i], trajs[cid][j], icfg["alphas"], icfg["max_len"])
        rows.append(
            {
                "pair": p,
                "cond_id": cid,
                "a": int(i),
                "b": int(j),
                "captions": [{"alpha": r.alpha, "caption": vocab.decode(r.caption.tokens), "extrapolated": r.extrapolated} for r in res],
            }
        )
    with open(out / "interpolations.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    cfg.dump(out / "config.json")
    for r in rows:
        print(f"[{r['cond_id']} {r['a']}->{r['b']}]")
        for c in r["captions"]:
            print(f"  {c['alpha']:.2f}  {c['caption']}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    e = cfg["evaluate"]
    split_name = args.split or cfg["sample"]["split"]
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, split_name)
    objs, _ = read_sample_sets(args.samples)
    samples = {o["cond_id"]: o["captions"] for o in objs}
    rankings = rank_by_consensus(samples, test_ds.features, train_ds, e["neighbors"]) if e["rerank"] else None
    report = evaluate_captions(samples, train_ds, test_ds, rankings, e["top"])
    report["k"] = min(len(c) for c in samples.values())
    report["n_conditions"] = len(samples)
    dump_report(report, out / "report.json", _metadata("evaluate", cfg))
    write_histograms_csv(ngram_histograms(samples, e["histogram_n"]), out / "ngram_positions.csv")
    cfg.dump(out / "config.json")
    print(json.dumps({k: report[k] for k in ("B4", "C", "distinct_pct", "novel", "mbleu4", "div1", "div2")}, sort_keys=True))


def cmd_export_latents(args, cfg: RunConfig) -> None:
    out = _outdir(args.out)
    x = dict(cfg["export"])
    if args.split:
        x["split"] = args.split
    if args.k is not None:
        x["k"] = args.k
    model, vocab, _ = model_from_checkpoint(load_checkpoint(args.model))
    data = _load_split(args.data, x["split"])
    rows = export_latent_means(model, vocab, data, out / "latent_means.csv", x["k"], cfg.seed, x["max_len"], x["temperature"])
    cfg.dump(out / "config.json")
    print(f"wrote {len(rows)} rows to {out / 'latent_means.csv'}")


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    g = cfg["gradcheck"]
    variants = [args.variant] if args.variant else g["variants"]
    worst_all = 0.0
    results = {}
    for v in variants:
        errs = toy_gradcheck(v, cfg.seed, g["eps"])
        name, worst = max(errs.items(), key=lambda kv: kv[1])
        worst_all = max(worst_all, worst)
        results[v] = errs
        print(f"{v}: {len(errs)} parameters, max relative error {worst:.3e} ({name})")
    if args.out:
        out = _outdir(args.out)
        _write_json({"threshold": g["threshold"], "max_relative_error": results}, out / "gradcheck.json")
    ok = worst_all < g["threshold"]
    print("PASS" if ok else "FAIL", f"(threshold {g['threshold']:.0e})")
    return 0 if ok else 2


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain-blm": cmd_pretrain_blm,
    "train": cmd_train,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "export-latents": cmd_export_latents,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"seqcvae {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    try:
        rc = COMMANDS[args.command](args, cfg)
    except TrainingDivergedError as exc:
        print(f"seqcvae {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"seqcvae {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
