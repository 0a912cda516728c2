import filecmp
from pathlib import Path

import numpy as np
import pytest

from dcsep import cli, corpus, metrics, signal
from dcsep.diagnostics import read_scatter_tsv
from dcsep.model import Model


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_index(path, toy_index, genders=None):
    lines = []
    for spk, paths in toy_index.items():
        for p in paths:
            g = f"\t{genders[spk]}" if genders else ""
            lines.append(f"{spk}\t{Path(p).name}{g}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def index_file(toy_index, tmp_path_factory):
    d = Path(next(iter(toy_index.values()))[0]).parent
    return write_index(d / "index.tsv", toy_index)


@pytest.fixture(scope="module")
def corpora(index_file, tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    for name, count, seed in (("train", 12, 1), ("valid", 4, 2), ("test", 4, 3)):
        assert run("mix", "--index", index_file, "--speakers", 2, "--count", count, "--snr", "-5,5",
                   "--seed", seed, "--out", root / name) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpora, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "train.cfg"
    cfg.write_text("\n".join([
        "batch_size = 4", "seed = 0", "patience = 3",
        "model.embedding_dim = 4", "model.hidden_units = 8", "model.blstm_layers = 2",
        "model.enh_hidden_units = 4", "model.enh_blstm_layers = 1",
        "dpcl_pretrain_100.max_epochs = 4", "dpcl_400.max_epochs = 1",
        "enh_only.max_epochs = 1", "end_to_end.max_epochs = 1",
    ]) + "\n")
    assert run("train", "--config", cfg, "--train", corpora / "train" / "manifest.tsv",
               "--valid", corpora / "valid" / "manifest.tsv", "--out", out) == 0
    return out


# ---------------------------------------------------------------- mix


def test_mix_file_count(corpora):
    files = sorted(p.name for p in (corpora / "train").iterdir())
    assert len(files) == 12 + 12 * 2 + 1
    assert "manifest.tsv" in files
    man = corpus.load_manifest(corpora / "train" / "manifest.tsv")
    assert len(man.entries) == 12 and man.num_speakers == 2


def test_mix_deterministic(index_file, tmp_path):
    for name in ("a", "b"):
        assert run("mix", "--index", index_file, "--speakers", 2, "--count", 3, "--seed", 4, "--out", tmp_path / name) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.left_only and not cmp.right_only
    assert all(filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in cmp.common_files)


def test_mix_equal_energy(index_file, tmp_path):
    assert run("mix", "--index", index_file, "--speakers", 2, "--count", 3, "--snr", "0,0", "--out", tmp_path) == 0
    man = corpus.load_manifest(tmp_path / "manifest.tsv")
    for e in man.entries:
        refs = [signal.read_wav(cli.source_path(tmp_path, e.mixture_id, k))[0] for k in range(2)]
        ratio = 10 * np.log10(np.sum(refs[0] ** 2) / np.sum(refs[1] ** 2))
        assert abs(ratio) < 0.01


# ---------------------------------------------------------------- train / separate


def test_train_outputs(trained):
    for stage in ("dpcl_pretrain_100", "dpcl_400", "enh_only", "end_to_end"):
        assert (trained / f"{stage}.ckpt").exists()
        assert (trained / f"{stage}.log.tsv").exists()
    stats = signal.load_global_stats(trained / "global_stats.bin")
    assert stats.mean.shape == (129,)


def test_separate_hard_improves(trained, corpora, tmp_path):
    assert run("separate", "--model", trained / "dpcl_400.ckpt", "--input", corpora / "test",
               "--num-sources", 2, "--out", tmp_path / "est") == 0
    assert run("evaluate", "--estimates", tmp_path / "est", "--references", corpora / "test",
               "--mixtures", corpora / "test", "--out", tmp_path / "report.tsv") == 0
    rows = metrics.read_report_tsv(tmp_path / "report.tsv")
    assert len(rows) == 8
    assert all(r["sdr_improvement_db"] > 0 for r in rows)


def test_hard_and_sharp_soft_masks_agree(trained, corpora):
    model, _ = Model.load(trained / "end_to_end.ckpt")
    for wav in cli.list_mixtures(corpora / "test"):
        x = corpus.load_source(wav, 8000)
        _, hard = model.masks(x, 2, "hard", seed=0)
        _, soft = model.masks(x, 2, "soft", alpha=1000.0, seed=0)
        assert np.mean(hard.argmax(0) == soft.argmax(0)) >= 0.99


def test_separate_enhanced_sums_to_input(trained, corpora, tmp_path):
    wav = cli.list_mixtures(corpora / "test")[0]
    assert run("separate", "--model", trained / "end_to_end.ckpt", "--input", wav, "--num-sources", 2,
               "--mode", "enhanced", "--out", tmp_path) == 0
    x, _ = signal.read_wav(wav)
    est = np.stack([signal.read_wav(cli.source_path(tmp_path, wav.stem, k))[0] for k in range(2)])
    lo, hi = signal.SignalConfig().covered_range(signal.stft(x).shape[0])
    # each output carries up to half an LSB of rounding
    assert np.max(np.abs(est.sum(0)[lo:hi] - x[lo:hi])) <= 1.0 / 32768 + 1e-12
    model, _ = Model.load(trained / "end_to_end.ckpt")
    flt = model.separate(x, 2, "enhanced")
    rel = np.linalg.norm(flt.sum(0)[lo:hi] - x[lo:hi]) / np.linalg.norm(x[lo:hi])
    assert rel < 1e-6


def test_separate_enhanced_incompatible_count(trained, corpora, tmp_path, capsys):
    wav = cli.list_mixtures(corpora / "test")[0]
    code = run("separate", "--model", trained / "end_to_end.ckpt", "--input", wav, "--num-sources", 3,
               "--mode", "enhanced", "--out", tmp_path)
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1 and len(err) == 1
    assert err[0].startswith("error\tseparate\tValueError\t")
    assert not list(tmp_path.iterdir())


def test_separate_no_enhancer(trained, corpora, tmp_path):
    wav = cli.list_mixtures(corpora / "test")[0]
    assert run("separate", "--model", trained / "dpcl_400.ckpt", "--input", wav, "--num-sources", 2,
               "--mode", "enhanced", "--out", tmp_path) == 1


def test_single_stage_from_init(trained, corpora, tmp_path):
    assert run("train", "--train", corpora / "train" / "manifest.tsv", "--valid", corpora / "valid" / "manifest.tsv",
               "--out", tmp_path, "--stage", "dpcl_400") == 2
    cfg = tmp_path / "c.cfg"
    cfg.write_text("dpcl_400.max_epochs = 1\nmodel.hidden_units = 8\n")
    assert run("train", "--config", cfg, "--train", corpora / "train" / "manifest.tsv",
               "--valid", corpora / "valid" / "manifest.tsv", "--out", tmp_path,
               "--stage", "dpcl_400", "--init", trained / "dpcl_pretrain_100.ckpt") == 0
    m, _ = Model.load(tmp_path / "dpcl_400.ckpt")
    assert m.meta["stages"] == ["dpcl_pretrain_100", "dpcl_400"]


# ---------------------------------------------------------------- evaluate


def test_evaluate_references_as_estimates(corpora, tmp_path):
    assert run("evaluate", "--estimates", corpora / "test", "--references", corpora / "test",
               "--mixtures", corpora / "test", "--out", tmp_path / "r.tsv") == 0
    rows = metrics.read_report_tsv(tmp_path / "r.tsv")
    for r in rows:
        assert r["input_sdr_db"] + r["sdr_improvement_db"] == pytest.approx(metrics.DB_CAP, abs=1e-9)
    summary = (tmp_path / "r.summary.tsv").read_text().splitlines()
    group, count, imp, mag = summary[1].split("\t")
    assert (group, int(count)) == ("overall", len(rows))
    assert float(imp) == pytest.approx(np.mean([r["sdr_improvement_db"] for r in rows]), rel=1e-12)
    assert float(mag) == pytest.approx(np.mean([r["magnitude_snr_db"] for r in rows]), rel=1e-12)


def test_evaluate_mixture_as_estimates(corpora, tmp_path):
    est = tmp_path / "est"
    est.mkdir()
    for wav in cli.list_mixtures(corpora / "test"):
        for k in range(2):
            cli.source_path(est, wav.stem, k).write_bytes(wav.read_bytes())
    assert run("evaluate", "--estimates", est, "--references", corpora / "test",
               "--mixtures", corpora / "test", "--out", tmp_path / "r.tsv") == 0
    for r in metrics.read_report_tsv(tmp_path / "r.tsv"):
        assert abs(r["sdr_improvement_db"]) < 1e-9


def test_evaluate_gender_split(toy_index, tmp_path):
    tone = toy_index["tone"]
    split = {"tone_a": tone[:2], "tone_b": tone[2:], "hiss": toy_index["hiss"]}
    genders = {"tone_a": "f", "tone_b": "f", "hiss": "m"}
    idx = write_index(Path(tone[0]).parent / "gender_index.tsv", split, genders)
    assert run("mix", "--index", idx, "--speakers", 2, "--count", 8, "--seed", 3, "--out", tmp_path / "c") == 0
    assert run("evaluate", "--estimates", tmp_path / "c", "--references", tmp_path / "c", "--mixtures", tmp_path / "c",
               "--manifest", tmp_path / "c" / "manifest.tsv", "--speaker-meta", idx,
               "--out", tmp_path / "r.tsv") == 0
    lines = (tmp_path / "r.summary.tsv").read_text().splitlines()[1:]
    counts = {l.split("\t")[0]: int(l.split("\t")[1]) for l in lines}
    man = corpus.load_manifest(tmp_path / "c" / "manifest.tsv")
    same = sum(1 for e in man.entries if {s.speaker_id for s in e.sources} == {"tone_a", "tone_b"})
    assert counts["overall"] == 16
    assert counts.get("same-gender", 0) == 2 * same
    assert counts.get("different-gender", 0) == 2 * (8 - same)


# ---------------------------------------------------------------- oracle / scatter


def test_oracle_ibm_close_to_wf(corpora, tmp_path):
    man = corpora / "test" / "manifest.tsv"
    assert run("oracle", "--manifest", man, "--type", "ibm", "--out", tmp_path / "ibm") == 0
    assert run("oracle", "--manifest", man, "--type", "wf", "--out", tmp_path / "wf", "--dump-masks") == 0
    ibm = metrics.read_report_tsv(tmp_path / "ibm" / "report.tsv")
    wf = metrics.read_report_tsv(tmp_path / "wf" / "report.tsv")
    head = (tmp_path / "ibm" / "report.tsv").read_text().splitlines()[0]
    assert head.split("\t") == metrics.REPORT_COLUMNS
    assert head == (tmp_path / "wf" / "report.tsv").read_text().splitlines()[0]
    mi = np.mean([r["sdr_improvement_db"] for r in ibm])
    mw = np.mean([r["sdr_improvement_db"] for r in wf])
    assert abs(mi - mw) < 0.1
    masks = sorted((tmp_path / "wf" / "masks").glob("*.npy"))
    assert len(masks) == 4
    m = np.load(masks[0])
    np.testing.assert_allclose(m.sum(0), 1.0, atol=1e-12)


def test_scatter_join(corpora, tmp_path):
    man = corpora / "test" / "manifest.tsv"
    assert run("oracle", "--manifest", man, "--type", "ibm", "--out", tmp_path / "a") == 0
    assert run("oracle", "--manifest", man, "--type", "wf", "--out", tmp_path / "b") == 0
    reports = [tmp_path / "a" / "report.tsv", tmp_path / "b" / "report.tsv"]
    assert run("scatter", "--reports", reports[0], "--reports", reports[1], "--out", tmp_path / "s.tsv") == 0
    pts = read_scatter_tsv(tmp_path / "s.tsv")
    rows = metrics.read_report_tsv(reports[0]) + metrics.read_report_tsv(reports[1])
    assert len(pts) == len(rows) == 16
    for p, r in zip(pts, rows):
        assert (p["mixture_id"], p["source"]) == (r["mixture_id"], r["source"])
        assert p["input_sdr_db"] == r["input_sdr_db"] and p["improvement_db"] == r["sdr_improvement_db"]
        assert np.isfinite(p["input_sdr_db"]) and np.isfinite(p["improvement_db"])


# ---------------------------------------------------------------- revcor


def test_revcor(trained, corpora, tmp_path):
    assert run("revcor", "--model", trained / "dpcl_400.ckpt", "--corpus", corpora / "test" / "manifest.tsv",
               "--layer", 1, "--out", tmp_path / "rc") == 0
    lines = (tmp_path / "rc" / "counts.tsv").read_text().splitlines()
    assert len(lines) == 1 + 16
    with np.load(tmp_path / "rc" / "patches.npz") as z:
        assert len(z.files) == 16
        active = [f for f in z.files if z[f].size]
        assert all(z[f].shape == (50, 129) for f in active)
    assert run("revcor", "--model", trained / "dpcl_400.ckpt", "--corpus", corpora / "test",
               "--layer", 0, "--context", 20, "--out", tmp_path / "rc0") == 0


# ---------------------------------------------------------------- errors


@pytest.mark.parametrize("argv", [
    ["mix", "--index", "missing.tsv", "--speakers", "2", "--count", "1", "--out", "x"],
    ["mix", "--speakers", "2"],
    ["separate", "--model", "nope.ckpt", "--input", ".", "--num-sources", "2", "--out", "x"],
    ["separate", "--model", "nope.ckpt", "--input", ".", "--num-sources", "1", "--out", "x"],
    ["oracle", "--manifest", "m.tsv", "--type", "best", "--out", "x"],
    ["frobnicate"],
])
def test_usage_errors(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 1
    fields = err[0].split("\t")
    assert fields[0] == "error" and fields[2] == "usage" and len(fields) == 4


def test_bad_snr_and_layer(index_file, trained, corpora, tmp_path, capsys):
    assert run("mix", "--index", index_file, "--speakers", 2, "--count", 1, "--snr", "5,1", "--out", tmp_path) == 2
    assert run("revcor", "--model", trained / "dpcl_400.ckpt", "--corpus", corpora / "test",
               "--layer", 2, "--out", tmp_path) == 2
    assert "--layer" in capsys.readouterr().err
