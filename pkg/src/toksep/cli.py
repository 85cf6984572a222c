"""Batch command-line surface for the token-extraction pipeline.

Subcommands: make-corpus, train-kmeans, tokenize, train, extract, eval,
grad-check, selftest.  Every run is a pure function of (inputs, config,
seed); config keys come from one schema (see --help epilog) and unknown
keys are rejected.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import audio, corpus, evaluate, frontend, model, nn, optim, tokenizer, trainer
from .config import (ConfigError, PipelineConfig, config_hash, describe_config,
                     load_config, validate_pipeline)
from .tensor import Tensor


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory or file")
    p.add_argument("--seed", type=int, default=None, help="master seed for all sections")
    p.add_argument("--mode", choices=trainer.MODES, default=None,
                   help="run mode: standard, nocat, or hybrid")


def _load_cfg(args) -> PipelineConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"frontend.seed={args.seed}", f"tokenizer.seed={args.seed}",
                      f"train.seed={args.seed}", f"corpus.seed={args.seed}"]
    if args.mode is not None:
        overrides.append(f"train.mode={args.mode}")
    return load_config(args.config, overrides)


def _check_codebook(cfg: PipelineConfig, cb: tokenizer.Codebook) -> None:
    if cb.K != cfg.model.K:
        raise ConfigError(f"codebook K {cb.K} != model.K {cfg.model.K}")
    if cb.layers != cfg.model.n_layers_in:
        raise ConfigError(f"codebook layers {cb.layers} != model.n_layers_in {cfg.model.n_layers_in}")
    if cb.dim != cfg.frontend.e_feat:
        raise ConfigError(f"codebook dim {cb.dim} != frontend.e_feat {cfg.frontend.e_feat}")


def _resolve_rows(manifest: Path) -> tuple[list[audio.ManifestRow], Path]:
    return audio.load_manifest(manifest), manifest.parent


def _checkpoint_hash_guard(meta: dict, cb: tokenizer.Codebook) -> None:
    got = meta.get("codebook_hash")
    if got != cb.hash():
        raise ConfigError(f"checkpoint codebook hash {got} != supplied codebook {cb.hash()}; "
                          "refusing to mix artifacts from different tokenizers")


def cmd_make_corpus(args) -> int:
    cfg = _load_cfg(args)
    table, pairs = corpus.build_corpus(cfg.corpus, args.out)
    print(f"wrote {cfg.corpus.n_speakers * cfg.corpus.n_utterances} utterances under {args.out}")
    print(f"utterance table: {table}")
    print(f"held-out mixture manifest: {pairs}")
    return 0


def cmd_train_kmeans(args) -> int:
    cfg = _load_cfg(args)
    validate_pipeline(cfg)
    table = corpus.load_utterance_table(args.corpus)
    stacks = []
    for spk in table.speakers():
        for path in table.paths(spk, train_only=True):
            stacks.append(frontend.extract(corpus.load_wav_cached(path), cfg.frontend))
    cb = tokenizer.fit_codebook(stacks, cfg.tokenizer.K, max_iter=cfg.tokenizer.max_iter,
                                tol=cfg.tokenizer.tol, seed=cfg.tokenizer.seed)
    cb.train_meta["config_hash"] = config_hash(cfg)
    out = args.out if args.out.suffix else args.out / "codebook.kmc1"
    out.parent.mkdir(parents=True, exist_ok=True)
    tokenizer.save_codebook(out, cb)
    for layer, info in zip(cb.layer_ids, cb.train_meta["layers"]):
        print(f"layer {layer}: inertia {info['inertia']:.6f} after {info['iterations']} iterations")
    print(f"codebook: {out} (hash {cb.hash()})")
    return 0


def _synth_row(row: audio.ManifestRow, base: Path, idx: int):
    snr = 2.5 if row.snr_db is None else float(row.snr_db)
    seed = idx if row.seed is None else int(row.seed)
    return audio.make_mixture_sample(audio.read_wav(base / row.target),
                                     audio.read_wav(base / row.interference),
                                     audio.read_wav(base / row.reference), snr, seed)


def cmd_tokenize(args) -> int:
    cfg = _load_cfg(args)
    validate_pipeline(cfg)
    cb = tokenizer.load_codebook(args.codebook)
    _check_codebook(cfg, cb)
    rows, base = _resolve_rows(args.manifest)
    mode = args.mode or "standard"
    args.out.mkdir(parents=True, exist_ok=True)
    for idx, row in enumerate(rows):
        sample, valid_m, valid_r = _synth_row(row, base, idx)
        item = trainer.prepare_item(sample, valid_m, valid_r, mode, cfg.frontend, cb)
        if mode == "hybrid":
            frontend.export_features(args.out / f"mix_{idx:04d}.feat1", item.mix)
        else:
            tokenizer.save_tokens(args.out / f"mix_{idx:04d}.tok1", item.mix)
        tokenizer.save_tokens(args.out / f"ref_{idx:04d}.tok1", item.ref)
        tokenizer.save_tokens(args.out / f"clean_{idx:04d}.tok1", item.clean)
    print(f"tokenized {len(rows)} rows into {args.out} (mode {mode})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    validate_pipeline(cfg)
    cb = tokenizer.load_codebook(args.codebook)
    _check_codebook(cfg, cb)
    table = corpus.load_utterance_table(args.corpus)
    result = trainer.train(cfg.train, cfg.model, cfg.frontend, cb, table, args.out,
                           resume=args.resume, config_hash=config_hash(cfg))
    print(f"trained {result.steps_run} steps, final loss {result.final_loss:.4f}, "
          f"probe accuracy {result.probe_accuracy:.3f}")
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"runlog: {result.log_path}")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_cfg(args)
    cb = tokenizer.load_codebook(args.codebook)
    ck = model.load_checkpoint(args.checkpoint)
    _checkpoint_hash_guard(ck.meta, cb)
    mode = args.mode or ck.meta.get("mode", "standard")
    rows, base = _resolve_rows(args.manifest)
    extractor = model.TokenExtractor(ck.cfg, ck.params)
    args.out.mkdir(parents=True, exist_ok=True)
    for idx, row in enumerate(rows):
        sample, valid_m, valid_r = _synth_row(row, base, idx)
        item = trainer.prepare_item(sample, valid_m, valid_r, mode, cfg.frontend, cb)
        pred = extractor.extract_tokens(item.mix, item.ref,
                                        mix_mask=trainer._or_none(item.mix_mask),
                                        ref_mask=trainer._or_none(item.ref_mask))
        tokenizer.save_tokens(args.out / f"pred_{idx:04d}.tok1", pred)
        if args.features:
            frontend.export_features(args.out / f"pred_{idx:04d}.feat1",
                                     tokenizer.detokenize(pred, cb))
    print(f"extracted {len(rows)} rows into {args.out} (mode {mode})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    cb = tokenizer.load_codebook(args.codebook)
    ck = model.load_checkpoint(args.checkpoint)
    mode = args.mode or ck.meta.get("mode", "standard")
    rows, base = _resolve_rows(args.manifest)
    report = evaluate.evaluate(ck.params, ck.cfg, cfg.frontend, cb, rows, base,
                               mode=mode, checkpoint_meta=ck.meta,
                               config_hash=config_hash(cfg))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (args.out / "report.txt").write_text(report.format_table() + "\n", encoding="utf-8")
    print(report.format_table())
    if not report.oracle_ok:
        print("oracle self-check FAILED", file=sys.stderr)
        return 3
    return 0


def cmd_grad_check(args) -> int:
    cfg = model.preset(args.preset)
    t_mix, t_ref = 4, 3
    rng = np.random.default_rng(np.random.SeedSequence([0x6AD, 7]))
    params = model.init_params(cfg, seed=7)
    extractor = model.TokenExtractor(cfg, params)
    mix = tokenizer.TokenGrid(rng.integers(0, cfg.K, (cfg.n_layers_in, t_mix)), cfg.K)
    ref = tokenizer.TokenGrid(rng.integers(0, cfg.K, (cfg.n_layers_in, t_ref)), cfg.K)
    clean = tokenizer.TokenGrid(rng.integers(0, cfg.K, (cfg.n_layers_in, t_mix)), cfg.K)
    feats = frontend.FeatureStack(rng.uniform(-1, 1, (cfg.n_layers_in, t_mix, cfg.e_feat)))
    worst = 0.0
    for label, mix_input in (("standard", mix), ("hybrid", feats)):
        def loss_fn(p):
            ext = model.TokenExtractor(cfg, p)
            return ext.loss(ext.forward(mix_input, ref), clean)

        err, per_group = optim.grad_check(loss_fn, params, per_group=True)
        worst = max(worst, err)
        for name in sorted(per_group):
            print(f"{label:<8} {name:<24} rel err {per_group[name]:.3e}")
        print(f"{label:<8} max rel err {err:.3e}")
    print(f"overall max rel err {worst:.3e} (threshold 1e-4)")
    return 0 if worst <= 1e-4 else 4


def cmd_selftest(args) -> int:
    checks: list[tuple[str, bool]] = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        print(f"{'ok  ' if ok else 'FAIL'} {name}")

    s = Tensor([1.0, 2.0, 3.0])
    from .tensor import softmax as tsoftmax
    probs = tsoftmax(s, axis=0).data
    check("softmax direct evaluation",
          np.allclose(probs, [0.09003057, 0.24472847, 0.66524096], atol=1e-5))
    logits = Tensor(np.zeros((4, 1000)))
    ce = nn.cross_entropy(logits, np.zeros(4, dtype=int)).item()
    check("cross entropy of uniform logits is ln K", abs(ce - np.log(1000.0)) < 1e-4)
    check("middle slice arithmetic", 350 - 2 * 100 == 150)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        rng = np.random.default_rng(0)
        fs = frontend.FeatureStack(rng.standard_normal((2, 3, 8)))
        frontend.export_features(tmp / "x.feat1", fs)
        check("FEAT1 round trip",
              np.array_equal(frontend.import_features(tmp / "x.feat1").data, fs.data))
        cents = rng.standard_normal((2, 4, 8))
        cb = tokenizer.Codebook(cents)
        tokenizer.save_codebook(tmp / "x.kmc1", cb)
        cb2 = tokenizer.load_codebook(tmp / "x.kmc1")
        check("KMC1 round trip", np.array_equal(cb.centroids, cb2.centroids))
        grid = tokenizer.TokenGrid(rng.integers(0, 4, (2, 5)), 4)
        tokenizer.save_tokens(tmp / "x.tok1", grid)
        check("TOK1 round trip",
              np.array_equal(tokenizer.load_tokens(tmp / "x.tok1").tokens, grid.tokens))
        w = audio.Waveform(rng.uniform(-0.5, 0.5, 16000))
        audio.write_wav(tmp / "x.wav", w)
        w2 = audio.read_wav(tmp / "x.wav")
        check("WAV round trip within quantization",
              np.abs(w.samples - w2.samples).max() <= 1.0 / 32768.0)
    check("edit distance [a,b,c] vs [a,b,d]",
          evaluate.edit_distance([1, 2, 3], [1, 2, 4]) == 1)
    failed = [n for n, ok in checks if not ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="toksep",
        description=__doc__,
        epilog=describe_config(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="synthesize the speaker-signature corpus")
    _add_common(p)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train-kmeans", help="fit per-layer codebooks on clean features")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True, help="utterance table (utterances.tsv)")
    p.set_defaults(func=cmd_train_kmeans)

    p = sub.add_parser("tokenize", help="tokenize manifest rows into TOK1 files")
    _add_common(p)
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train a token extractor")
    _add_common(p)
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True, help="utterance table (utterances.tsv)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="run a checkpoint over manifest rows")
    _add_common(p)
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--features", action="store_true", help="also write detokenized FEAT1")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="score a checkpoint on held-out mixtures")
    _add_common(p)
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter group")
    _add_common(p)
    p.add_argument("--preset", default="tiny", help="model preset to check")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("selftest", help="fast invariant battery")
    _add_common(p)
    p.set_defaults(func=cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, model.CheckpointFormatError,
            trainer.TrainDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
