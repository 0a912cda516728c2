"""Command-line entry points.

    dcsep mix       build a mixture manifest and render its WAVs
    dcsep train     run the training curriculum (or a single stage)
    dcsep separate  separate mixture WAVs with a trained checkpoint
    dcsep evaluate  score estimated sources against references
    dcsep oracle    score ideal-binary or Wiener-like oracle masks
    dcsep scatter   (input SDR, improvement) pairs from evaluation reports
    dcsep revcor    spike-triggered averages of hidden BLSTM nodes

File layout shared by all commands: a mixture is ``<id>.wav`` and its
sources (references or estimates) are ``<id>_s<k>.wav`` with ``k`` from 0.
Failures print one tab-separated line to stderr,
``error<TAB>command<TAB>kind<TAB>message``, and exit with status 2 for bad
flags or missing inputs and 1 for anything else.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus, diagnostics, metrics, signal, trainer
from .model import Model

SOURCE_RE = re.compile(r"^(?P<id>.+)_s(?P<k>\d+)$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ----------------------------------------------------------------

def _exists(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _snr_range(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--snr expects lo,hi, got {text!r}") from None
    if lo > hi:
        raise UsageError("--snr lower bound exceeds upper bound")
    return lo, hi


def source_path(directory, mixture_id, k) -> Path:
    return Path(directory) / f"{mixture_id}_s{k}.wav"


def list_mixtures(directory) -> list[Path]:
    """Mixture WAVs in ``directory`` (files not named like a source)."""
    return sorted(p for p in Path(directory).glob("*.wav") if not SOURCE_RE.match(p.stem))


def _read_sources(directory, mixture_id, sample_rate) -> np.ndarray:
    paths = []
    k = 0
    while source_path(directory, mixture_id, k).exists():
        paths.append(source_path(directory, mixture_id, k))
        k += 1
    if not paths:
        raise FileNotFoundError(f"no {mixture_id}_s<k>.wav files in {directory}")
    return np.stack(corpus._truncate([corpus.load_source(p, sample_rate) for p in paths]))


def read_index(path) -> tuple[dict, dict]:
    """Speaker index TSV: ``speaker_id<TAB>path[<TAB>gender]`` per line.

    Relative paths resolve against the index file's directory and are stored
    absolute so manifests stay valid wherever they are written. Returns
    ``({speaker: [paths]}, {speaker: gender})``.
    """
    path = Path(path)
    index, gender = {}, {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected speaker<TAB>path[<TAB>gender]")
        spk, p = parts[0], Path(parts[1])
        if not p.is_absolute():
            p = path.parent / p
        index.setdefault(spk, []).append(str(p.resolve()))
        if len(parts) == 3:
            gender[spk] = parts[2]
    if not index:
        raise ValueError(f"{path}: empty speaker index")
    return index, gender


def read_speaker_meta(path) -> dict:
    """``speaker_id<TAB>gender`` lines (an index file with genders also works)."""
    meta = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.strip().split("\t")
        if not parts[0] or parts[0].startswith("#"):
            continue
        if len(parts) == 2:
            meta[parts[0]] = parts[1]
        elif len(parts) == 3:
            meta[parts[0]] = parts[2]
        else:
            raise ValueError(f"{path}:{lineno}: expected speaker<TAB>gender")
    return meta


def gender_groups(manifest: corpus.MixtureManifest, meta: dict) -> dict:
    """``same-gender`` / ``different-gender`` label per mixture with full metadata."""
    groups = {}
    for e in manifest.entries:
        genders = [meta.get(s.speaker_id) for s in e.sources]
        if None in genders:
            continue
        groups[e.mixture_id] = "same-gender" if len(set(genders)) == 1 else "different-gender"
    return groups


def summary_path(report_path) -> Path:
    p = Path(report_path)
    return p.with_name(p.stem + ".summary.tsv")


def _write_report(out, reports, groups=None):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report_tsv(out, reports)
    metrics.write_summary_tsv(summary_path(out), metrics.summarize(metrics.read_report_tsv(out), groups))


# -- commands ---------------------------------------------------------------

def cmd_mix(args):
    if args.speakers < 2:
        raise UsageError("--speakers must be at least 2")
    if args.count < 1:
        raise UsageError("--count must be positive")
    snr = _snr_range(args.snr)
    index, _ = read_index(_exists(args.index))
    manifest = corpus.build_manifest(index, args.speakers, args.count, snr, args.seed, args.sample_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save_manifest(out / "manifest.tsv", manifest)
    for e in manifest.entries:
        mix, refs = corpus.render_mixture(e, signal.SignalConfig(sample_rate=args.sample_rate))
        signal.write_wav(out / f"{e.mixture_id}.wav", mix, args.sample_rate)
        for k, r in enumerate(refs):
            signal.write_wav(source_path(out, e.mixture_id, k), r, args.sample_rate)
    print(f"wrote {len(manifest.entries)} mixtures to {out}")


def _load_manifests(paths, scfg):
    out = {}
    for p in paths:
        m = corpus.load_manifest(p)
        if m.num_speakers in out:
            raise UsageError(f"two manifests for {m.num_speakers} speakers")
        out[m.num_speakers] = trainer.render_utterances(m, scfg, Path(p).parent)
    return out


def cmd_train(args):
    for p in args.train + args.valid:
        _exists(p, "manifest")
    if args.init:
        _exists(args.init, "checkpoint")
    if args.stage and args.stage != "dpcl_pretrain_100" and not args.init and not args.skip_pretrain:
        raise UsageError(f"--stage {args.stage} needs --init")
    if args.config:
        base, overrides = trainer.load_curriculum_config(_exists(args.config, "config"))
    else:
        base, overrides = trainer.TrainConfig(), {}
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    scfg = signal.SignalConfig()
    train = _load_manifests(args.train, scfg)
    valid = _load_manifests(args.valid, scfg)
    start = Model.load(args.init)[0] if args.init else None
    data = trainer.prepare_corpus(train, valid, scfg, base.model.silence_db,
                                  stats=start.stats if start is not None else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage:
        kw = {"segment_len": trainer.STAGE_SEGMENT_LEN[args.stage], **overrides.get(args.stage, {})}
        if args.skip_pretrain:
            kw["allow_skip_pretrain"] = True
        cfg = replace(base, stage=args.stage, **kw)
        if start is not None:
            cfg = replace(cfg, model=start.cfg)
        model, opt, tlog = trainer.run_stage(cfg, data, start)
        model.save(out / f"{args.stage}.ckpt", opt)
        tlog.write(out / f"{args.stage}.log.tsv")
    else:
        trainer.curriculum(base, data, out, overrides, skip_pretrain=args.skip_pretrain)
    signal.save_global_stats(out / "global_stats.bin", data.stats)
    print(f"checkpoints written to {out}")


def cmd_separate(args):
    if args.num_sources < 2:
        raise UsageError("--num-sources must be at least 2")
    if args.alpha is not None and args.alpha < 0:
        raise UsageError("--alpha must be non-negative")
    inp = _exists(args.input, "input")
    model, _ = Model.load(_exists(args.model, "checkpoint"))
    if args.mode == "enhanced":
        if not model.has_enhancer:
            raise ValueError("checkpoint has no enhancement network")
        trained = model.meta.get("enh_sources")
        if trained and args.num_sources not in trained:
            raise ValueError(f"enhancement network was trained for C in {trained}, not {args.num_sources}")
    files = list_mixtures(inp) if inp.is_dir() else [inp]
    if not files:
        raise UsageError(f"no mixture WAVs in {inp}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fs = model.scfg.sample_rate
    for f in files:
        est = model.separate(corpus.load_source(f, fs), args.num_sources, args.mode, args.alpha, args.seed)
        for k, e in enumerate(est):
            signal.write_wav(source_path(out, f.stem, k), e, fs)
    print(f"separated {len(files)} files into {out}")


def cmd_evaluate(args):
    for d in (args.estimates, args.references, args.mixtures):
        _exists(d, "directory")
    if bool(args.speaker_meta) != bool(args.manifest):
        raise UsageError("--speaker-meta and --manifest go together")
    groups = None
    if args.speaker_meta:
        groups = gender_groups(corpus.load_manifest(_exists(args.manifest)),
                               read_speaker_meta(_exists(args.speaker_meta)))
    mixtures = list_mixtures(args.mixtures)
    if not mixtures:
        raise UsageError(f"no mixture WAVs in {args.mixtures}")
    scfg = signal.SignalConfig(sample_rate=args.sample_rate)
    reports = []
    for m in mixtures:
        mix = corpus.load_source(m, scfg.sample_rate)
        refs = _read_sources(args.references, m.stem, scfg.sample_rate)
        est = _read_sources(args.estimates, m.stem, scfg.sample_rate)
        if est.shape[0] != refs.shape[0]:
            raise ValueError(f"{m.stem}: {est.shape[0]} estimates for {refs.shape[0]} references")
        n = min(len(mix), refs.shape[1], est.shape[1])
        reports.append(metrics.evaluate_separation(est[:, :n], refs[:, :n], mix[:n], m.stem, scfg))
    _write_report(args.out, reports, groups)
    print(f"evaluated {len(reports)} mixtures; report {args.out}")


def cmd_oracle(args):
    manifest = corpus.load_manifest(_exists(args.manifest, "manifest"))
    base = Path(args.manifest).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dump_masks:
        (out / "masks").mkdir(exist_ok=True)
    scfg = signal.SignalConfig()
    make_mask = metrics.ideal_binary_mask if args.type == "ibm" else metrics.wiener_like_filter
    reports = []
    for e in manifest.entries:
        mix, refs = corpus.render_mixture(e, scfg, base)
        X = signal.stft(mix, scfg)
        masks = make_mask(np.abs(np.stack([signal.stft(r, scfg) for r in refs])))
        est = np.zeros_like(refs)
        for c, m in enumerate(masks):
            y = signal.istft(signal.apply_mask(X, m), scfg)
            est[c, : len(y)] = y[: refs.shape[1]]
        if args.dump_masks:
            np.save(out / "masks" / f"{e.mixture_id}.npy", masks)
        reports.append(metrics.evaluate_separation(est, refs, mix, e.mixture_id, scfg))
    _write_report(out / "report.tsv", reports)
    print(f"{args.type} oracle on {len(reports)} mixtures; report {out / 'report.tsv'}")


def cmd_scatter(args):
    rows = []
    for p in args.reports:
        rows += metrics.read_report_tsv(_exists(p, "report"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    diagnostics.write_scatter_tsv(out, diagnostics.scatter_points(rows))
    print(f"wrote {len(rows)} points to {out}")


def _corpus_waves(path, sample_rate):
    p = _exists(path, "corpus")
    if p.is_dir():
        files = list_mixtures(p)
        if not files:
            raise UsageError(f"no mixture WAVs in {p}")
        return [corpus.load_source(f, sample_rate) for f in files]
    manifest = corpus.load_manifest(p)
    scfg = signal.SignalConfig(sample_rate=sample_rate)
    return [corpus.render_mixture(e, scfg, p.parent)[0] for e in manifest.entries]


def cmd_revcor(args):
    if not 0.0 < args.threshold <= 1.0:
        raise UsageError("--threshold must be in (0, 1]")
    if args.context < 1:
        raise UsageError("--context must be positive")
    model, _ = Model.load(_exists(args.model, "checkpoint"))
    if not 0 <= args.layer < model.cfg.blstm_layers:
        raise UsageError(f"--layer must be in [0, {model.cfg.blstm_layers})")
    waves = _corpus_waves(args.corpus, model.scfg.sample_rate)
    pairs = [model.layer_activations(w, args.layer) for w in waves]
    res = diagnostics.revcor(pairs, args.threshold, args.context)
    diagnostics.write_revcor(args.out, res, args.layer)
    print(f"revcor layer {args.layer}: {int((res.counts > 0).sum())}/{len(res.counts)} nodes active")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dcsep", description="Deep clustering speech separation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mix", help="build and render a mixture corpus")
    p.add_argument("--index", required=True, help="speaker index TSV (speaker, path[, gender])")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--snr", default="0,10", help="relative SNR range lo,hi in dB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train the curriculum or one stage")
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--train", action="append", required=True, help="training manifest (repeat per speaker count)")
    p.add_argument("--valid", action="append", required=True, help="validation manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=trainer.STAGES, help="run a single stage")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--skip-pretrain", action="store_true", help="train dpcl_400 from scratch")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate mixture WAVs")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="mixture WAV or directory of mixtures")
    p.add_argument("--num-sources", type=int, required=True)
    p.add_argument("--mode", choices=("hard", "soft", "enhanced"), default="hard")
    p.add_argument("--alpha", type=float, help="override the soft K-means hardness")
    p.add_argument("--seed", type=int, default=0, help="clustering initialisation seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="score estimates against references")
    p.add_argument("--estimates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--mixtures", required=True)
    p.add_argument("--out", required=True, help="report TSV; a .summary.tsv is written next to it")
    p.add_argument("--manifest", help="manifest naming each mixture's speakers")
    p.add_argument("--speaker-meta", help="speaker<TAB>gender file for the gender split")
    p.add_argument("--sample-rate", type=int, default=8000)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle", help="score oracle masks on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--type", choices=("ibm", "wf"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-masks", action="store_true", help="save masks as masks/<id>.npy")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("scatter", help="input SDR vs improvement points")
    p.add_argument("--reports", action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scatter)

    p = sub.add_parser("revcor", help="spike-triggered averages of BLSTM nodes")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="directory of mixture WAVs or a manifest")
    p.add_argument("--layer", type=int, default=0, help="BLSTM layer, counted from 0")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--context", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_revcor)
    return ap


def _one_line(text) -> str:
    return " ".join(str(text).split())


def _glue_negative_ranges(argv):
    """``--snr -5,5`` would parse as a flag; rewrite it as ``--snr=-5,5``."""
    out = []
    i = 0
    while i < len(argv):
        if argv[i] == "--snr" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--snr={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = _glue_negative_ranges(sys.argv[1:] if argv is None else list(argv))
    command = next((a for a in argv if not a.startswith("-")), "-")
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"error\t{command}\tusage\t{_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        print(f"error\t{command}\t{type(exc).__name__}\t{_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
