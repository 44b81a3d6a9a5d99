"""Acceptance suite.  Each test prints one PASS/FAIL line via record_criterion
and the lines are repeated in the terminal summary.

The 2,000-step toy teacher is trained once per session and shared by
criteria 4, 6, 7 and 8.
"""

import contextlib
import dataclasses
import io
import itertools
import json
import math
import time
from functools import lru_cache

import numpy as np
import pytest
import torch

from conftest import fd_relative_error, randomize_, record_criterion
from sdtts.cli import main
from sdtts.config import preset, save_config
from sdtts.data import MelSpectrogram, SyntheticVoices, make_synthetic_corpus
from sdtts.distill import TrainItem, generate_parallel_pairs, init_models, mix_batch, train_teacher
from sdtts.evaluation import SyntheticTranscriber, cosine_sim, levenshtein, measure_rtf, sigma_sweep
from sdtts.model import ZeroShotTTS, collate
from sdtts.objectives import (
    PatchDiscriminator,
    loss_adv_d,
    loss_adv_g,
    loss_cyc,
    loss_kl,
    loss_pred,
    loss_rec,
)
from sdtts.speaker import build_embedder


@pytest.fixture(scope="session")
def trained_teacher(toy_corpus):
    cfg = preset("toy")
    fresh, _ = init_models(cfg)
    t0 = time.perf_counter()
    result = train_teacher(toy_corpus, cfg)
    return {
        "cfg": cfg,
        "result": result,
        "seconds": time.perf_counter() - t0,
        "embedder_before": fresh.embedder.checksum(),
    }


# 1 ---------------------------------------------------------------------------


def test_c01_flow_contract():
    t0 = time.perf_counter()
    cfg = preset("toy").model
    torch.manual_seed(0)
    flow = ZeroShotTTS(cfg).flow
    for layer in flow.layers:
        layer.post.reset_parameters()  # trained-like, non-zero shifts
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            L = int(torch.randint(1, 12, (1,), generator=g))
            z = torch.randn(1, L, cfg.d_latent, generator=g)
            c = torch.randn(1, L, cfg.d_model, generator=g)
            mask = torch.ones(1, L, dtype=torch.bool)
            worst = max(worst, float((flow.inverse(flow(z, c, mask), c, mask) - z).abs().max()))

    flow64 = randomize_(ZeroShotTTS(cfg).flow, seed=3, scale=0.5).double()
    L = 1  # one position: a D_z x D_z Jacobian
    z = torch.randn(1, L, cfg.d_latent, dtype=torch.float64, generator=g)
    c = torch.randn(1, L, cfg.d_model, dtype=torch.float64, generator=g)
    mask = torch.ones(1, L, dtype=torch.bool)
    h, n = 1e-6, z.numel()
    jac = torch.zeros(n, n, dtype=torch.float64)
    with torch.no_grad():
        for j in range(n):
            e = torch.zeros(n, dtype=torch.float64)
            e[j] = h
            up = flow64((z.reshape(-1) + e).view_as(z), c, mask)
            down = flow64((z.reshape(-1) - e).view_as(z), c, mask)
            jac[:, j] = (up - down).reshape(-1) / (2 * h)
    sign, logdet = torch.linalg.slogdet(jac)
    elapsed = time.perf_counter() - t0

    ok = worst < 1e-5 and float(sign) == 1.0 and abs(float(logdet)) < 1e-4 and elapsed < 10
    record_criterion(1, "flow contract", ok, f"round-trip {worst:.2e}, |logdet| {abs(float(logdet)):.2e}, {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _grad_cases(dtype):
    """name -> (loss closure, tensors to differentiate)."""
    cfg = preset("toy").model
    g = _gen(0)
    # drawn in 32-bit then cast, so both precisions see the same values
    r = lambda *s: torch.randn(*s, generator=g).to(dtype)  # noqa: E731
    cases = {}

    mel_hat, mel = r(2, 6, 4).requires_grad_(), r(2, 6, 4)
    mask = torch.tensor([[1] * 6, [1] * 4 + [0] * 2], dtype=torch.bool)
    cases["L_rec"] = (lambda: loss_rec(mel_hat, mel, mask), [mel_hat])

    mu, logvar = r(3, 5).requires_grad_(), (0.5 * r(3, 5)).requires_grad_()
    cases["L_KL"] = (lambda: loss_kl(mu, logvar), [mu, logvar])

    torch.manual_seed(0)
    disc = randomize_(PatchDiscriminator(channels=4, n_layers=2), seed=1, scale=0.3).to(dtype)
    real, fake = r(8, 8), r(8, 8).requires_grad_()
    dparams = list(disc.parameters())
    cases["L_adv (D)"] = (lambda: loss_adv_d(disc(real), disc(fake.detach())), dparams)
    cases["L_adv (G)"] = (lambda: loss_adv_g(disc(fake)), [fake])

    pred, target = r(2, 7).requires_grad_(), r(2, 7)
    cases["L_pred"] = (lambda: loss_pred(pred, target, mask[:, :1].expand(2, 7)), [pred])

    e_hat, e = r(4, 6).requires_grad_(), r(4, 6)
    cases["L_cyc"] = (lambda: loss_cyc(e_hat, e), [e_hat])

    torch.manual_seed(0)
    model = ZeroShotTTS(cfg)
    randomize_(model.decoder, seed=9, scale=0.3)
    randomize_(model.fusion, seed=10, scale=0.3)
    model.to(dtype)
    e_con, e_spk = r(3, cfg.d_model), r(cfg.d_spk).requires_grad_()
    pitch, energy, dur = torch.rand(3, generator=g).to(dtype), torch.rand(3, generator=g).to(dtype), [2, 1, 3]
    tgt = r(6, cfg.n_mels)
    dec = lambda: ((model.decode_mel(e_con, e_spk, pitch, energy, dur) - tgt) ** 2).mean()  # noqa: E731
    cases["AdaIN decoder"] = (dec, [e_spk] + list(model.decoder.parameters()))

    e_ling, z = r(5, cfg.d_model), r(5, cfg.d_latent).requires_grad_()
    w = r(5, cfg.d_model)
    cases["fuse_content"] = (lambda: (torch.tanh(model.fuse_content(e_ling, z)) * w).sum(), [z] + list(model.fusion.parameters()))
    return cases


def _fd_against_64(case32, case64, n_probe=24, h=1e-6, seed=0):
    """32-bit analytic gradient vs a 64-bit central difference at the same point."""
    (fn32, t32), (fn64, t64) = case32, case64
    grads = torch.autograd.grad(fn32(), t32, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(t32, grads)]
    rng = np.random.default_rng(seed)
    sizes = np.array([t.numel() for t in t64])
    analytic, numeric = [], []
    for _ in range(n_probe):
        ti = int(rng.choice(len(t64), p=sizes / sizes.sum()))
        j = int(rng.integers(sizes[ti]))
        flat = t64[ti].data.view(-1)
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = float(fn64())
            flat[j] = old - h
            down = float(fn64())
            flat[j] = old
        numeric.append((up - down) / (2 * h))
        analytic.append(float(grads[ti].reshape(-1)[j]))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def test_c02_gradient_suite():
    t0 = time.perf_counter()
    c64, c32 = _grad_cases(torch.float64), _grad_cases(torch.float32)
    errors = {}
    for name in c64:
        errors[(name, "64")] = (fd_relative_error(*c64[name], n_probe=24), 1e-5)
        errors[(name, "32")] = (_fd_against_64(c32[name], c64[name]), 1e-3)
    elapsed = time.perf_counter() - t0
    bad = {k: v[0] for k, v in errors.items() if not v[0] < v[1]}
    worst64 = max(e for (n, d), (e, _) in errors.items() if d == "64")
    worst32 = max(e for (n, d), (e, _) in errors.items() if d == "32")
    ok = not bad and elapsed < 60
    record_criterion(2, "gradient suite", ok, f"{len(c64)} terms, worst 64-bit {worst64:.1e}, 32-bit {worst32:.1e}, {elapsed:.1f}s")
    assert ok, bad


# 3 ---------------------------------------------------------------------------


def _cyc_scalar(e_hat, e):
    b = len(e)
    cos = lambda x, y: float(np.dot(x, y) / (math.sqrt(np.dot(x, x)) * math.sqrt(np.dot(y, y))))  # noqa: E731
    total = 0.0
    for i in range(b):
        den = sum(math.exp(cos(e_hat[i], e[j])) for j in range(b) if j != i)
        total -= math.log(math.exp(cos(e_hat[i], e[i])) / den)
    return total / b


def test_c03_cyc_exactness():
    ortho = torch.eye(2, dtype=torch.float64)
    same = torch.tensor([[0.3, -1.2, 2.0], [0.3, -1.2, 2.0]], dtype=torch.float64)
    case_a = float(loss_cyc(ortho, ortho))
    case_b = float(loss_cyc(same, same))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        b, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        e_hat, e = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        got = float(loss_cyc(torch.from_numpy(e_hat), torch.from_numpy(e)))
        worst = max(worst, abs(got - _cyc_scalar(e_hat, e)))
    ok = abs(case_a + 1) < 1e-7 and abs(case_b) < 1e-7 and worst < 1e-6
    record_criterion(3, "cyclic loss exactness", ok, f"cases {case_a:+.9f} {case_b:+.9f}, oracle max diff {worst:.1e}")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_c04_detachment(toy_corpus, trained_teacher):
    torch.manual_seed(0)
    model = ZeroShotTTS(preset("toy").model).train()
    utts = list(toy_corpus)[:6]
    batch = collate(utts, utts[::-1])
    out = model(batch)
    m = batch.phone_mask
    loss = (
        loss_pred(out["dur_hat"], torch.log(batch.durations.clamp(min=1).float()), m)
        + loss_pred(out["pitch_hat"], batch.pitch, m)
        + loss_pred(out["energy_hat"], batch.energy, m)
    )
    loss.backward()
    norms = [0.0 if p.grad is None else float(p.grad.norm()) for p in model.content_parameters()]
    style_moved = any(p.grad is not None and float(p.grad.norm()) > 0 for p in model.style_encoder.parameters())
    after = trained_teacher["result"].checkpoint.model.embedder.checksum()
    ok = max(norms) == 0.0 and style_moved and after == trained_teacher["embedder_before"]
    record_criterion(4, "detachment", ok, f"max content grad norm {max(norms)}, embedder checksum unchanged={after == trained_teacher['embedder_before']}")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_c05_mixing_exactness():
    expected = {(0.0, 64): 0, (0.5, 64): 32, (0.8, 64): 51, (1.0, 10): 10}
    corpus = make_synthetic_corpus(1, 64, seed=1, min_frames=16)
    pool = [TrainItem(u, u, u.mel.frames) for u in corpus]
    pairs = {u.uid: type("P", (), {"synthetic_mel": MelSpectrogram(-u.mel.frames)}) for u in corpus}
    rng = np.random.default_rng(0)
    failures = []
    for (sigma, b), want in expected.items():
        for k in range(100):
            items = [pool[i] for i in rng.choice(64, size=b, replace=False)]
            out, mask = mix_batch(items, pairs, sigma, rng)
            swapped = sum(not np.array_equal(o.content, i.content) for o, i in zip(out, items))
            if int(mask.sum()) != want or swapped != want:
                failures.append((sigma, b, k, int(mask.sum())))
    ok = not failures
    record_criterion(5, "mixing exactness", ok, "counts " + ", ".join(f"{s:g}/{b}->{w}" for (s, b), w in expected.items()))
    assert ok, failures[:5]


# 6 ---------------------------------------------------------------------------


def test_c06_pair_alignment(toy_corpus, trained_teacher, tmp_path):
    cfg = trained_teacher["cfg"]
    manifest = generate_parallel_pairs(trained_teacher["result"].checkpoint, toy_corpus, cfg.distill, tmp_path / "pairs.jsonl")
    good = sum(p.synthetic_mel.n_frames == p.source.mel.n_frames and p.speakers[0] != p.speakers[1] for p in manifest.pairs)
    ok = len(manifest) == len(toy_corpus) == 32 and good == len(manifest)
    record_criterion(6, "pair alignment", ok, f"{good}/{len(manifest)} pairs aligned with a different speaker")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_c07_teacher_overfit(trained_teacher):
    reports = trained_teacher["result"].reports
    first, last = reports[0].rec, reports[-1].rec
    finite = all(np.isfinite(list(r.to_dict().values())).all() for r in reports)
    secs = trained_teacher["seconds"]
    ok = len(reports) == 2000 and last < 0.1 * first and finite and secs < 15 * 60
    record_criterion(7, "teacher overfit", ok, f"L_rec {first:.3f} -> {last:.3f} ({last / first:.1%}), {secs:.0f}s")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_c08_directional_distillation(toy_corpus, trained_teacher, tmp_path):
    """Soft criterion: the toy-scale trend only."""
    cfg = trained_teacher["cfg"]
    teacher = trained_teacher["result"].checkpoint
    pairs = generate_parallel_pairs(teacher, toy_corpus, cfg.distill)
    held = list(make_synthetic_corpus(4, 3, 0, first_speaker=100))
    texts = [u.phonemes.ids for u in list(toy_corpus)[:6]]
    embedder = build_embedder(cfg.model.embedder, n_mels=cfg.model.n_mels, dim=cfg.model.d_raw, seed=999)
    transcriber = SyntheticTranscriber(SyntheticVoices(cfg.model.n_mels, cfg.model.vocab_size, 0))
    rows = sigma_sweep(
        toy_corpus,
        [0.0, 0.5, 0.8, 1.0],
        cfg,
        teacher=teacher,
        pairs=pairs,
        prompts=held,
        texts=texts,
        embedder=embedder,
        transcriber=transcriber,
        export_dir=tmp_path,
    )
    by = {r.sigma: r for r in rows}
    cers = [r.report.cer for r in rows]
    # relative spread; identical CERs (including all zero) count as no variation
    spread = 0.0 if max(cers) == min(cers) else (max(cers) - min(cers)) / max(cers)
    sim_ok = by[0.8].report.sim_mean >= by[0.0].report.sim_mean
    dist_ok = by[0.8].centroid_distance < by[0.0].centroid_distance
    ok = sim_ok and dist_ok and spread < 0.2
    detail = (
        f"SIM {by[0.0].report.sim_mean:.4f} -> {by[0.8].report.sim_mean:.4f}, "
        f"centroid {by[0.0].centroid_distance:.4f} -> {by[0.8].centroid_distance:.4f}, "
        f"CER {' '.join(f'{c:.3f}' for c in cers)} (spread {spread:.0%})"
    )
    record_criterion(8, "directional distillation (soft)", ok, detail)
    assert ok


# 9 ---------------------------------------------------------------------------


def test_c09_metric_oracles(toy_corpus):
    strings = ["".join(s) for n in range(7) for s in itertools.product("abc", repeat=n)]

    @lru_cache(maxsize=None)
    def best_alignment(a, b):
        # minimum cost over every alignment of a against b, by first move
        if not a or not b:
            return len(a) + len(b)
        return min(
            best_alignment(a[1:], b) + 1,
            best_alignment(a, b[1:]) + 1,
            best_alignment(a[1:], b[1:]) + (a[0] != b[0]),
        )

    mismatches = sum(levenshtein(a, b) != best_alignment(a, b) for a in strings for b in strings)
    best_alignment.cache_clear()

    s = 1 / math.sqrt(2)
    cos_cases = [([1, 0], [0, 1], 0.0), ([1, 2, 3], [2, 4, 6], 1.0), ([1, 0], [-3, 0], -1.0), ([1, 1], [1, 0], s)]
    cos_err = max(abs(cosine_sim(a, b) - want) for a, b, want in cos_cases)

    class Sleepy:
        def __call__(self, text, prompt):
            time.sleep(0.16)
            return MelSpectrogram(np.zeros((100, 4)), hop_length=256, sample_rate=16000)

    rtf = measure_rtf(Sleepy(), [([1, 2], toy_corpus[0])], repeats=3, warmup=1).rtf  # 0.16 s / 1.6 s
    ok = mismatches == 0 and cos_err < 1e-8 and abs(rtf - 0.1) < 0.01
    record_criterion(
        9, "metric oracles", ok, f"{len(strings) ** 2} string pairs, {mismatches} mismatches; cosine err {cos_err:.0e}; RTF {rtf:.4f}"
    )
    assert ok


# 10 --------------------------------------------------------------------------


def _pipeline(root, cfg_path):
    steps = [
        ["make-corpus", "--config", cfg_path, "--out", root / "corpus"],
        ["make-corpus", "--config", cfg_path, "--out", root / "held", "--first-speaker", 100, "--n-speakers", 2],
        ["train-teacher", "--config", cfg_path, "--corpus", root / "corpus/manifest.jsonl", "--out", root / "teacher"],
        ["gen-pairs", "--teacher", root / "teacher/teacher.ckpt", "--corpus", root / "corpus/manifest.jsonl",
         "--out", root / "pairs"],
        ["train-student", "--config", cfg_path, "--corpus", root / "corpus/manifest.jsonl",
         "--pairs", root / "pairs/pairs.jsonl", "--sigma", 0.8, "--out", root / "student"],
        ["eval", "--checkpoint", root / "student/student.ckpt", "--corpus", root / "held/manifest.jsonl",
         "--texts", root / "corpus/manifest.jsonl", "--max-texts", 3, "--out", root / "eval"],
    ]
    err = io.StringIO()
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(err):
        for argv in steps:
            assert main([str(a) for a in argv]) == 0, err.getvalue()
    def first(name):
        rec = json.loads((root / name).read_text().splitlines()[0])
        rec.pop("wall")  # wall-clock
        return rec

    synth = sorted((root / "pairs/synth").iterdir())
    report = json.loads((root / "eval/eval.json").read_text())
    report.pop("rtf")  # wall-clock
    return {
        "manifest": (root / "pairs/pairs.jsonl").read_bytes(),
        "synth": [p.read_bytes() for p in synth],
        "teacher_step1": first("teacher/teacher_log.jsonl"),
        "student_step1": first("student/student_log.jsonl"),
        "eval": report,
    }


def test_c10_end_to_end_determinism(tmp_path):
    cfg = preset("toy")
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=3))
    save_config(cfg, tmp_path / "toy.json")
    a = _pipeline(tmp_path / "a", tmp_path / "toy.json")
    b = _pipeline(tmp_path / "b", tmp_path / "toy.json")
    same = {k: a[k] == b[k] for k in a}
    ok = all(same.values()) and len(a["synth"]) == 32
    record_criterion(10, "end-to-end determinism", ok, ", ".join(f"{k} {'equal' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
