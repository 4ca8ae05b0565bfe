"""Command-line entry point: gen-data, train, synthesize, finetune,
bench-latency, eval.

Every command is deterministic given (config, seed): randomness flows from
the single run seed through per-module streams, outputs carry no
timestamps, and inputs are never mutated. STREAMSYNTH_OUT overrides the
output root for relative --out paths.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import cfm as cfm_mod
from . import dataio
from . import fsq as fsq_mod
from . import latency as lat_mod
from . import persist
from . import rl as rl_mod
from . import seqlm
from . import tensor as T
from .config import ConfigError, RunConfig, load_config, split_seed
from .metrics import MetricsReport
from .nn import Adam, Linear
from .tensor import Tensor

MASKS = {
    "noncausal": cfm_mod.MaskKind.NON_CAUSAL,
    "causal": cfm_mod.MaskKind.FULL_CAUSAL,
    "chunk": cfm_mod.MaskKind.CHUNK,
    "chunk2": cfm_mod.MaskKind.CHUNK2,
}


def _out_dir(raw: str) -> Path:
    root = os.environ.get("STREAMSYNTH_OUT")
    path = Path(raw)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_cfg(args) -> RunConfig:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    cfg = load_config(args.config, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    return cfg


def _vocab(cfg: RunConfig) -> seqlm.Vocabulary:
    codebook = fsq_mod.FsqConfig(cfg.fsq.d, cfg.fsq.k).codebook_size
    return seqlm.Vocabulary(codebook, cfg.seqlm.text_alphabet)


def _speaker(cfg: RunConfig) -> np.ndarray:
    rng = np.random.default_rng(split_seed(cfg.run.seed, "speaker"))
    return rng.normal(0.0, 1.0, cfg.cfm.speaker_dim)


def _corpus_assets(cfg: RunConfig):
    vocab = _vocab(cfg)
    rng = np.random.default_rng(split_seed(cfg.run.seed, "corpus"))
    motifs = dataio.motif_map(vocab, rng)
    pairs = dataio.gen_pairs(vocab, motifs, rng, cfg.seqlm.pairs,
                             cfg.seqlm.min_text_len, cfg.seqlm.max_text_len)
    return vocab, motifs, pairs


def _report(cfg: RunConfig, metrics: dict[str, float]) -> MetricsReport:
    return MetricsReport(metrics, config_hash=cfg.config_hash(), seed=cfg.run.seed)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing {what}: {p}")
    return p


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    vocab, motifs, pairs = _corpus_assets(cfg)
    dataio.write_corpus(out / "corpus.txt", pairs)
    speaker = _speaker(cfg)
    with open(out / "speaker.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(" ".join(repr(float(x)) for x in speaker) + "\n")
    feat_dir = out / "features"
    feat_dir.mkdir(exist_ok=True)
    frng = np.random.default_rng(split_seed(cfg.run.seed, "features"))
    for i, (_, speech) in enumerate(pairs):
        seq = dataio.features_for_tokens(speech, speaker, cfg.cfm.n_features, frng)
        cfm_mod.write_feature_file(feat_dir / f"pair_{i:03d}.sfea", seq)
    _report(cfg, {
        "pairs": float(len(pairs)),
        "speech_tokens": float(sum(len(s) for _, s in pairs)),
    }).write(out / "report_gen_data.txt")
    print(f"wrote corpus of {len(pairs)} pairs to {out}")
    return 0


def _train_sequences(cfg, vocab, pairs):
    icfg = seqlm.InterleaveConfig(cfg.seqlm.n, cfg.seqlm.m)
    seqs = []
    for text, speech in pairs:
        seqs.append(seqlm.build_nonstream(vocab, text, speech))
        seqs.append(seqlm.build_stream(vocab, text, speech, icfg))
    return seqs, icfg


def _token_accuracy(model, seqs) -> float:
    hit = total = 0
    for seq in seqs:
        logits = model.forward(seq.ids).data
        for i, scored in enumerate(seq.loss_mask):
            if scored:
                total += 1
                hit += int(np.argmax(logits[i]) == seq.targets[i])
    return hit / max(total, 1)


def _train_lm(cfg: RunConfig, data: Path, out: Path) -> dict[str, float]:
    vocab = _vocab(cfg)
    pairs = dataio.read_corpus(_require_file(data / "corpus.txt", "corpus"))
    seqs, _ = _train_sequences(cfg, vocab, pairs)
    model = seqlm.ToyLM(vocab, dim=cfg.seqlm.dim, n_blocks=cfg.seqlm.n_blocks,
                        max_len=cfg.seqlm.max_len,
                        rng=np.random.default_rng(split_seed(cfg.run.seed, "lm-init")))
    rng = np.random.default_rng(split_seed(cfg.run.seed, "lm-train"))
    if cfg.seqlm.train_steps > 0:
        loss = seqlm.train_lm(model, seqs, cfg.seqlm.train_steps, rng,
                              lr=cfg.seqlm.lr, batch_size=cfg.seqlm.batch_size,
                              target_loss=cfg.seqlm.target_loss)
    else:
        loss = seqlm.evaluate_loss(model, seqs)
    persist.save_lm(out / "lm.ssyn", model)
    return {"loss": loss, "token_accuracy": _token_accuracy(model, seqs)}


def _train_cfm(cfg: RunConfig, data: Path, out: Path) -> dict[str, float]:
    pairs = dataio.read_corpus(_require_file(data / "corpus.txt", "corpus"))
    speaker = np.array([float(x) for x in
                        _require_file(data / "speaker.txt", "speaker vector")
                        .read_text().split()])
    features = []
    for i in range(len(pairs)):
        features.append(cfm_mod.read_feature_file(
            _require_file(data / "features" / f"pair_{i:03d}.sfea", "feature file")))
    codebook = fsq_mod.FsqConfig(cfg.fsq.d, cfg.fsq.k).codebook_size
    mcfg = cfm_mod.CfmConfig(
        n_features=cfg.cfm.n_features, token_vocab=codebook,
        token_embed=cfg.cfm.token_embed, hidden=cfg.cfm.hidden,
        speaker_dim=cfg.cfm.speaker_dim, lookahead=cfg.cfm.lookahead,
        p_uncond=cfg.cfm.p_uncond, beta=cfg.cfm.beta, nfe=cfg.cfm.nfe)
    model = cfm_mod.CfmModel(mcfg, np.random.default_rng(split_seed(cfg.run.seed, "cfm-init")))
    rng = np.random.default_rng(split_seed(cfg.run.seed, "cfm-train"))
    params = model.parameters()
    opt = Adam(params, lr=cfg.cfm.lr)
    history = []
    for step in range(cfg.cfm.train_steps):
        i = int(rng.integers(len(pairs)))
        opt.zero_grad()
        with T.Tape() as tape:
            loss = cfm_mod.training_step(model, features[i], speaker, pairs[i][1], rng,
                                         chunk=cfg.cfm.chunk_frames)
        tape.backward(loss)
        opt.step()
        history.append(loss.item())
    persist.save_cfm(out / "cfm.ssyn", model)
    span = min(100, max(len(history) // 2, 1))
    return {
        "loss_first": float(np.mean(history[:span])) if history else 0.0,
        "loss_last": float(np.mean(history[-span:])) if history else 0.0,
    }


def _train_fsq(cfg: RunConfig, data: Path, out: Path) -> dict[str, float]:
    """Toy supervised tokenizer: encoder, codec bottleneck, label classifier."""
    vocab = _vocab(cfg)
    pairs = dataio.read_corpus(_require_file(data / "corpus.txt", "corpus"))
    fcfg = fsq_mod.FsqConfig(cfg.fsq.d, cfg.fsq.k)
    init = np.random.default_rng(split_seed(cfg.run.seed, "fsq-init"))
    codec = fsq_mod.FsqCodec(fcfg, hidden=cfg.fsq.hidden, rng=init)
    enc1 = Linear(init, cfg.fsq.hidden, cfg.fsq.hidden, std=0.3)
    enc2 = Linear(init, cfg.fsq.hidden, cfg.fsq.hidden, std=0.3)
    head = Linear(init, cfg.fsq.hidden, cfg.seqlm.text_alphabet, std=0.3)
    params = codec.parameters() + enc1.parameters() + enc2.parameters() + head.parameters()
    base = np.random.default_rng(split_seed(cfg.run.seed, "fsq-data")) \
        .normal(0.0, 1.0, (cfg.seqlm.text_alphabet, cfg.fsq.hidden))
    rng = np.random.default_rng(split_seed(cfg.run.seed, "fsq-train"))

    def batch_features(text):
        labels = [t - vocab.speech_size for t in text]
        x = base[labels] + 0.1 * rng.standard_normal((len(labels), cfg.fsq.hidden))
        return Tensor(x), labels

    opt = Adam(params, lr=5e-3)
    steps = max(cfg.seqlm.train_steps, 1)
    acc_hits = acc_total = 0
    tokens_seen: list[int] = []
    for step in range(steps):
        text, _ = pairs[int(rng.integers(len(pairs)))]
        x, labels = batch_features(text)
        opt.zero_grad()
        with T.Tape() as tape:
            h = T.relu(enc2(T.relu(enc1(x))))
            digits, up = codec.quantize(h)
            logits = head(T.relu(up))
            loss = T.cross_entropy_ignore(logits, labels, [False] * len(labels))
        tape.backward(loss)
        opt.step()
        if step >= steps - 50:
            acc_hits += int((np.argmax(logits.data, axis=1) == np.array(labels)).sum())
            acc_total += len(labels)
            tokens_seen.extend(fsq_mod.encode_index(row, fcfg.k) for row in digits)
    util, _ = fsq_mod.utilization(tokens_seen, fcfg)
    persist.save_codec(out / "fsq.ssyn", codec)
    return {"accuracy": acc_hits / max(acc_total, 1), "utilization": util}


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    data = Path(args.data)
    trainers = {"lm": _train_lm, "cfm": _train_cfm, "fsq": _train_fsq}
    metrics = trainers[args.target](cfg, data, out)
    _report(cfg, metrics).write(out / f"report_train_{args.target}.txt")
    summary = ", ".join(f"{k}={v:.6g}" for k, v in metrics.items())
    print(f"trained {args.target}: {summary}")
    return 0


def _parse_text(vocab: seqlm.Vocabulary, raw: str) -> list[int]:
    symbols = [int(x) for x in raw.split()]
    return [vocab.text_id(s) for s in symbols]


def cmd_synthesize(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    lm = persist.load_lm(_require_file(args.lm, "LM checkpoint"))
    model = persist.load_cfm(_require_file(args.cfm, "flow-matching checkpoint"))
    vocab = lm.vocab
    icfg = seqlm.InterleaveConfig(cfg.seqlm.n, cfg.seqlm.m)
    text = _parse_text(vocab, args.text)
    speaker = _speaker(cfg)
    spec = cfm_mod.MaskSpec(MASKS[args.mask], chunk=args.chunk_frames)
    seed = split_seed(cfg.run.seed, "synthesize-noise")
    ref = cfm_mod.FeatureSeq(np.zeros((0, model.config.n_features)))

    mode = "stream" if args.mode == "stream" else "nonstream"
    prompt = seqlm.build_icl_prompt(vocab, [], text, [], mode, icfg)
    if args.mode == "stream":
        result = seqlm.GenerationResult([], [], [])
        chunk_iter = seqlm.generate_chunks(lm, prompt, vocab, icfg, _sink=result)
        frames = []
        for k, feat in enumerate(cfm_mod.stream_generate(
                model, chunk_iter, speaker, ref, nfe=args.nfe, beta=args.beta,
                spec=spec, seed=seed)):
            frames.append(feat.frames)
            print(f"--chunk {k}--")
        feats = cfm_mod.FeatureSeq(np.concatenate(frames, axis=0) if frames
                                   else np.zeros((0, model.config.n_features)))
        tokens = result.speech
        truncated = result.truncated
    else:
        result = seqlm.generate(lm, prompt, vocab, icfg)
        tokens = result.speech
        truncated = result.truncated
        cond = cfm_mod.ConditionSet(speaker, tokens, ref)
        feats = cfm_mod.sample(model, cond, cfm_mod.UPSAMPLE * len(tokens),
                               nfe=args.nfe, beta=args.beta, spec=spec, seed=seed)
    fsq_mod.write_token_file(out / "tokens.txt", tokens,
                             fsq_mod.FsqConfig(cfg.fsq.d, cfg.fsq.k))
    cfm_mod.write_feature_file(out / "features.sfea", feats)
    if truncated:
        print("warning: generation hit the length budget before E")
    print(f"synthesized {len(tokens)} tokens -> {len(feats)} frames ({args.mode})")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    data = Path(args.data)
    lm = persist.load_lm(_require_file(args.lm, "LM checkpoint"))
    vocab = lm.vocab
    pairs = dataio.read_corpus(_require_file(data / "corpus.txt", "corpus"))
    crng = np.random.default_rng(split_seed(cfg.run.seed, "corpus"))
    motifs = dataio.motif_map(vocab, crng)

    fcfg = fsq_mod.FsqConfig(cfg.fsq.d, cfg.fsq.k)
    arng = np.random.default_rng(split_seed(cfg.run.seed, "asr"))
    codec = fsq_mod.FsqCodec(fcfg, hidden=cfg.fsq.hidden, rng=arng)
    asr = rl_mod.ToyAsrBackend(codec, vocab, rng=arng)
    rl_mod.train_asr_backend(asr, pairs, steps=min(400, 8 * len(pairs)), rng=arng)

    rng = np.random.default_rng(split_seed(cfg.run.seed, "finetune"))
    texts = [t for t, _ in pairs]
    metrics: dict[str, float] = {}
    tau = args.tau if args.tau is not None else cfg.rl.tau
    beta_dpo = args.beta_dpo if args.beta_dpo is not None else cfg.rl.beta_dpo
    steps = args.steps if args.steps is not None else cfg.rl.steps

    if args.objective in ("dpo", "both"):
        ref = rl_mod.clone_frozen_lm(lm)
        prefs = rl_mod.make_preference_pairs(lm, asr, texts, motifs, rng)
        if not prefs:
            print("no usable preference pairs (all candidates identical)")
            return 1
        dataio.write_preference_file(out / "preferences.txt", prefs)
        metrics["margin_before"] = rl_mod.preference_margin(lm, prefs)
        rl_mod.finetune_dpo(lm, ref, prefs, steps, rng, beta_dpo=beta_dpo, lr=cfg.rl.lr)
        metrics["margin_after"] = rl_mod.preference_margin(lm, prefs)
    if args.objective in ("asr", "both"):
        icfg = seqlm.InterleaveConfig(cfg.seqlm.n, cfg.seqlm.m)

        def generated_asr_loss() -> float:
            losses = []
            for text in texts[:10]:
                prompt = seqlm.build_icl_prompt(vocab, [], text, [], "nonstream", icfg)
                gen = seqlm.generate(lm, prompt, vocab, icfg)
                losses.append(rl_mod.asr_nll_hard(asr, gen.speech, text))
            return float(np.mean(losses))

        metrics["asr_loss_before"] = generated_asr_loss()
        rl_mod.finetune_asr(lm, asr, texts, steps, rng, tau=tau, lr=cfg.rl.lr)
        metrics["asr_loss_after"] = generated_asr_loss()

    persist.save_lm(out / "lm_finetuned.ssyn", lm)
    _report(cfg, metrics).write(out / "report_finetune.txt")
    print("finetune done: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


def cmd_bench_latency(args) -> int:
    timing = lat_mod.StageTiming(args.d_lm, args.d_fm, args.d_voc, args.d_llm)
    bound_tts = lat_mod.l_tts(args.m, timing)
    bound_chat = lat_mod.l_chat_bound(args.n, args.m, timing)
    report = lat_mod.simulate(lat_mod.scripted_token_source(3 * args.m, args.m),
                              timing, args.m, n_text=0, overlap=args.overlap)
    chat = lat_mod.simulate(lat_mod.scripted_token_source(3 * args.m, args.m),
                            timing, args.m, n_text=args.n, overlap=args.overlap)
    lines = [
        f"l_tts_formula={bound_tts!r}",
        f"l_tts_simulated={report.first_package_seconds!r}",
        f"l_chat_bound={bound_chat!r}",
        f"l_chat_simulated={chat.first_package_seconds!r}",
        f"tokens_before_first_package={report.tokens_before_first_package}",
        f"overlap={args.overlap}",
    ]
    print("stage      seconds")
    for stage, secs in report.breakdown.items():
        print(f"{stage:<10} {secs:.6f}")
    print(f"{'total':<10} {report.first_package_seconds:.6f}")
    for line in lines:
        print(line)
    if args.out:
        out = _out_dir(args.out)
        with open(out / "report_latency.txt", "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    data = Path(args.data)
    lm = persist.load_lm(_require_file(args.lm, "LM checkpoint"))
    vocab = lm.vocab
    pairs = dataio.read_corpus(_require_file(data / "corpus.txt", "corpus"))
    seqs, _ = _train_sequences(cfg, vocab, pairs)
    metrics = {
        "loss": seqlm.evaluate_loss(lm, seqs),
        "token_accuracy": _token_accuracy(lm, seqs),
    }
    all_tokens = [tok for _, speech in pairs for tok in speech]
    util, _ = fsq_mod.utilization(all_tokens, fsq_mod.FsqConfig(cfg.fsq.d, cfg.fsq.k))
    metrics["utilization"] = util
    if args.cfm:
        model = persist.load_cfm(_require_file(args.cfm, "flow-matching checkpoint"))
        speaker = _speaker(cfg)
        ref = cfm_mod.FeatureSeq(np.zeros((0, model.config.n_features)))
        sampled, target = [], []
        for i, (_, speech) in enumerate(pairs[:5]):
            cond = cfm_mod.ConditionSet(speaker, speech, ref)
            feats = cfm_mod.sample(model, cond, cfm_mod.UPSAMPLE * len(speech),
                                   nfe=cfg.cfm.nfe, beta=cfg.cfm.beta,
                                   spec=cfm_mod.MaskSpec(MASKS[cfg.cfm.mask],
                                                         cfg.cfm.chunk_frames),
                                   seed=split_seed(cfg.run.seed, f"eval-{i}"))
            sampled.append(feats.frames)
            target.append(cfm_mod.read_feature_file(
                _require_file(data / "features" / f"pair_{i:03d}.sfea",
                              "feature file")).frames)
        metrics["energy_distance"] = cfm_mod.energy_distance(
            np.concatenate(sampled), np.concatenate(target))
    _report(cfg, metrics).write(out / "report_eval.txt")
    print("eval: " + ", ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamsynth",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value section config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="synthesize the paired toy corpus")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a module on generated data")
    common(p)
    p.add_argument("--target", choices=("fsq", "lm", "cfm"), required=True)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synthesize", help="text ids -> speech tokens -> features")
    common(p)
    p.add_argument("--lm", required=True, help="LM checkpoint path")
    p.add_argument("--cfm", required=True, help="flow-matching checkpoint path")
    p.add_argument("--text", required=True, help="space-separated text symbol ids")
    p.add_argument("--mode", choices=("offline", "stream"), default="offline")
    p.add_argument("--mask", choices=tuple(MASKS), default="chunk")
    p.add_argument("--chunk-frames", type=int, default=30)
    p.add_argument("--nfe", type=int, default=10)
    p.add_argument("--beta", type=float, default=0.7)
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("finetune", help="DPO / differentiable ASR-reward tuning")
    common(p)
    p.add_argument("--lm", required=True, help="LM checkpoint path")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--objective", choices=("dpo", "asr", "both"), required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--beta-dpo", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("bench-latency", help="first-package latency model + simulator")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--m", type=int, default=15)
    p.add_argument("--d-lm", type=float, default=0.010)
    p.add_argument("--d-fm", type=float, default=0.005)
    p.add_argument("--d-voc", type=float, default=0.002)
    p.add_argument("--d-llm", type=float, default=0.020)
    p.add_argument("--overlap", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench_latency)

    p = sub.add_parser("eval", help="corpus metrics for trained checkpoints")
    common(p)
    p.add_argument("--lm", required=True, help="LM checkpoint path")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--cfm", default=None, help="optional flow-matching checkpoint")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
