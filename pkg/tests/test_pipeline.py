import csv
import io
import logging
from dataclasses import replace

import numpy as np
import pytest

from fsvc import cli, dsp, formats, pipeline
from fsvc.dsp import AudioSignal
from fsvc.errors import DegenerateError, FormatError, InputError
from fsvc.formats import PipelineConfig
from fsvc.pipeline import SpeakerProfile

from helpers import samples_for_frames, speechlike

CFG = PipelineConfig(ppg_classes=16, ppg_hidden=32, ppg_epochs=5, synth_epochs=300)


def write(path, signal):
    formats.write_wav(signal, path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("speaker")
    corpus = root / "corpus"
    corpus.mkdir()
    for i, f0 in enumerate((170.0, 180.0, 190.0)):
        write(corpus / f"utt{i}.wav", speechlike(seed=10 + i, f0_mean=f0))
    write(corpus / "zz_silent.wav", AudioSignal(np.zeros(16000)))
    ext_path = root / "ppg.fvcm"
    pipeline.cmd_train_ppg(corpus, ext_path, CFG)
    prof = pipeline.cmd_train_synth(corpus, root / "spk.profile", ext_path, CFG)
    return root, corpus, ext_path, prof


# --- extract -------------------------------------------------------------------


def test_extract_outputs(tmp_path, trained):
    _, _, ext_path, _ = trained
    wav = write(tmp_path / "s.wav", speechlike(seed=1))
    outs = {k: tmp_path / f"s.{k}" for k in ("mfcc", "ppg", "pros", "feat")}
    pipeline.cmd_extract(wav, outs["mfcc"], outs["ppg"], outs["pros"], outs["feat"], ext_path, CFG)
    mfcc, grid = formats.load_features(outs["mfcc"])
    assert mfcc.shape == (98, 39) and grid.n_frames == 98
    assert formats.load_features(outs["feat"])[0].shape == (98, 20)
    assert formats.load_features(outs["pros"])[0].shape == (98, 3)
    ppg = formats.load_ppg_file(outs["ppg"], 16)
    np.testing.assert_allclose(np.exp(ppg.log_post).sum(axis=1), 1.0, atol=1e-5)
    grids = {formats.load_features(p)[1] for p in outs.values()}
    assert len(grids) == 1


def test_extract_is_bit_identical(tmp_path):
    wav = write(tmp_path / "s.wav", speechlike(seed=2))
    a, b = tmp_path / "a.fvcf", tmp_path / "b.fvcf"
    pipeline.cmd_extract(wav, mfcc_out=a, feat_out=tmp_path / "fa")
    pipeline.cmd_extract(wav, mfcc_out=b, feat_out=tmp_path / "fb")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "fa").read_bytes() == (tmp_path / "fb").read_bytes()


def test_extract_ppg_needs_model(tmp_path):
    wav = write(tmp_path / "s.wav", speechlike(seed=2))
    with pytest.raises(InputError, match="extractor"):
        pipeline.cmd_extract(wav, ppg_out=tmp_path / "p")


# --- training ------------------------------------------------------------------


def test_silent_file_skipped(trained):
    _, _, _, prof = trained
    assert prof.n_utterances == 3


def test_silent_file_warning(tmp_path, trained):
    _, corpus, ext_path, _ = trained
    files = sorted(corpus.glob("*.wav"))
    ext = formats.load_ppg_extractor(ext_path)
    logger = logging.getLogger("fsvc.pipeline")
    seen = []
    handler = logging.Handler()
    handler.emit = seen.append
    logger.addHandler(handler)
    try:
        out = pipeline.build_corpus(files, ext, CFG)
    finally:
        logger.removeHandler(handler)
    assert len(out) == 3
    assert any("zz_silent" in r.getMessage() for r in seen)


def test_profile_contents(trained):
    root, _, _, prof = trained
    back = SpeakerProfile.load(root / "spk.profile")
    assert back.checkpoint.resolve() == (root / "spk.fvcm").resolve()
    assert back.logf0_std > 1e-8
    assert np.log(150) < back.logf0_mean < np.log(230)


def test_self_conversion_mse_below_twice_training_loss(trained):
    _, corpus, _, prof = trained
    params = formats.load_synthesizer(prof.checkpoint)
    final = float(params.meta["final_loss"])
    ext = formats.load_ppg_extractor(prof.extractor)
    for wav in sorted(corpus.glob("utt*.wav")):
        sig = formats.read_wav(wav)
        target = dsp.analyze(sig)[3].frames
        got = pipeline.convert_features(sig, prof, 1.0, CFG, params, ext).frames
        mse = float(np.mean((got - target) ** 2))
        assert mse < 2 * final, (wav.name, mse, final)


def test_init_from_zero_epochs_copies_checkpoint(tmp_path, trained):
    _, corpus, ext_path, prof = trained
    p2 = pipeline.cmd_train_synth(corpus, tmp_path / "b.profile", ext_path, CFG,
                                  init_from=prof.checkpoint, epochs=0)
    a = formats.load_synthesizer(prof.checkpoint).tensors
    b = formats.load_synthesizer(p2.checkpoint).tensors
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_all_silent_corpus_rejected(tmp_path, trained):
    _, _, ext_path, _ = trained
    (tmp_path / "c").mkdir()
    write(tmp_path / "c" / "x.wav", AudioSignal(np.zeros(8000)))
    with pytest.raises(DegenerateError):
        pipeline.cmd_train_synth(tmp_path / "c", tmp_path / "p.profile", ext_path, CFG)
    with pytest.raises(InputError, match="no .wav"):
        pipeline.cmd_train_synth(tmp_path, tmp_path / "p.profile", ext_path, CFG)


def test_train_ppg_uses_lab_files(tmp_path):
    d = tmp_path / "c"
    d.mkdir()
    for i in range(2):
        write(d / f"u{i}.wav", speechlike(seed=i))
        (d / f"u{i}.lab").write_text(" ".join(str((t // 10) % 4) for t in range(98)))
    cfg = replace(CFG, ppg_classes=4, ppg_epochs=2)
    params = pipeline.cmd_train_ppg(d, tmp_path / "m.fvcm", cfg)
    assert params.n_classes == 4
    (d / "u1.lab").write_text("1 2 3")
    with pytest.raises(FormatError, match="3 labels for 98 frames"):
        pipeline.cmd_train_ppg(d, tmp_path / "m.fvcm", cfg)


# --- conversion ------------------------------------------------------------------


@pytest.mark.parametrize("rate,frames", [(0.8, 125), (1.0, 100), (1.2, 83)])
def test_convert_length_law(tmp_path, trained, rate, frames):
    _, _, _, prof = trained
    src = speechlike(seed=7, seconds=(samples_for_frames(100) + 0.5) / 16000)
    wav = write(tmp_path / "src.wav", src)
    out = pipeline.cmd_convert(wav, prof, tmp_path / "o.wav", rate, CFG)
    assert frames == round(100 / rate)
    assert len(out) == frames * 160
    assert len(formats.read_wav(tmp_path / "o.wav")) == frames * 160


def test_convert_deterministic(tmp_path, trained):
    root, _, _, _ = trained
    wav = write(tmp_path / "src.wav", speechlike(seed=8))
    pipeline.cmd_convert(wav, root / "spk.profile", tmp_path / "a.wav", 1.2, CFG, seed=5)
    pipeline.cmd_convert(wav, root / "spk.profile", tmp_path / "b.wav", 1.2, CFG, seed=5)
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_untrained_profile_still_converts(tmp_path):
    prof = pipeline.fresh_profile(tmp_path / "fresh", config=CFG)
    wav = write(tmp_path / "src.wav", speechlike(seed=9))
    out = pipeline.cmd_convert(wav, tmp_path / "fresh" / "untrained.profile", tmp_path / "o.wav", 1.0, CFG)
    assert len(out) == 98 * 160
    assert np.all(np.isfinite(out.samples))
    assert prof.n_utterances == 0


def test_convert_rejects_unvoiced_source(tmp_path, trained):
    _, _, _, prof = trained
    noise = AudioSignal(np.random.default_rng(0).standard_normal(16000) * 0.1)
    with pytest.raises(DegenerateError):
        pipeline.cmd_convert(write(tmp_path / "n.wav", noise), prof, tmp_path / "o.wav")


def test_vocode_feature_file(tmp_path):
    wav = write(tmp_path / "s.wav", speechlike(seed=3))
    pipeline.cmd_extract(wav, feat_out=tmp_path / "s.feat")
    out = pipeline.cmd_vocode(tmp_path / "s.feat", tmp_path / "v.wav")
    assert len(out) == 98 * 160
    pipeline.cmd_extract(wav, mfcc_out=tmp_path / "s.mfcc")
    with pytest.raises(FormatError, match="expected 20"):
        pipeline.cmd_vocode(tmp_path / "s.mfcc", tmp_path / "v.wav")


def test_profile_rejects_missing_checkpoint(tmp_path, trained):
    root, _, _, _ = trained
    text = (root / "spk.profile").read_text().replace("spk.fvcm", "gone.fvcm")
    (tmp_path / "p.profile").write_text(text)
    with pytest.raises(InputError, match="does not exist"):
        SpeakerProfile.load(tmp_path / "p.profile")
    (tmp_path / "q.profile").write_text(text + "colour = blue\n")
    with pytest.raises(FormatError, match="colour"):
        SpeakerProfile.load(tmp_path / "q.profile")


# --- bench -----------------------------------------------------------------------


def test_bench_csv(tmp_path, trained):
    _, _, _, prof = trained
    text = pipeline.cmd_bench(prof, [64], repeats=5, csv_out=tmp_path / "b.csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [r["mode"] for r in rows] == ["parallel", "ar_emulation"]
    assert all(r["T"] == "64" for r in rows)
    assert float(rows[0]["speedup"]) > 1
    assert (tmp_path / "b.csv").read_text() == text
    again = pipeline.cmd_bench(prof, [64], repeats=1)
    assert again.splitlines()[0] == text.splitlines()[0]
    assert len(again.splitlines()) == len(text.splitlines())


def test_bench_empty_list_is_header_only(trained):
    _, _, _, prof = trained
    assert pipeline.cmd_bench(prof, [], repeats=1) == "mode,T,median_ms,p90_ms,speedup\n"


# --- CLI -----------------------------------------------------------------------


def test_cli_extract_and_vocode(tmp_path, capsys):
    wav = write(tmp_path / "s.wav", speechlike(seed=4))
    assert cli.main(["extract", str(wav), "--feat", str(tmp_path / "f")]) == 0
    assert "frames=98" in capsys.readouterr().out
    assert cli.main(["vocode", str(tmp_path / "f"), str(tmp_path / "o.wav")]) == 0
    assert "samples=15680" in capsys.readouterr().out


def test_cli_convert_with_rate(tmp_path, trained, capsys):
    root, _, _, _ = trained
    wav = write(tmp_path / "s.wav", speechlike(seed=5))
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(CFG.to_text())
    code = cli.main(["convert", str(wav), str(root / "spk.profile"), str(tmp_path / "o.wav"),
                     "--rate", "0.8", "--config", str(cfg)])
    assert code == 0
    assert f"samples={round(98 / 0.8) * 160}" in capsys.readouterr().out


def test_cli_bench_stdout(trained, capsys):
    root, _, _, _ = trained
    assert cli.main(["bench", str(root / "spk.profile"), "--T", "16", "--repeats", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "mode,T,median_ms,p90_ms,speedup" and len(lines) == 3


@pytest.mark.parametrize(
    "argv,code",
    [
        (["extract", "/nonexistent.wav", "--mfcc", "x"], "io"),
        (["vocode", "{bad}", "o.wav"], "format"),
        (["convert", "a.wav", "/nonexistent.profile", "o.wav"], "input"),
        (["convert", "a.wav", "p", "o.wav", "--rate", "3"], "input"),
    ],
)
def test_cli_errors_are_one_line(tmp_path, capsys, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "{bad}").write_bytes(b"FVCF" + b"\0" * 10)
    assert cli.main(argv) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"fsvc-error[{code}]: ")


def test_cli_bad_config_key(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("bogus = 1\n")
    assert cli.main(["vocode", "f", "o", "--config", str(tmp_path / "c.txt")]) == 1
    assert "unknown key 'bogus'" in capsys.readouterr().err


def test_cli_usage_error_exit_2(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["nonsense"])
    assert ei.value.code == 2
