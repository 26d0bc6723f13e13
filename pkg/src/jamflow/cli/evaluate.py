"""Held-out evaluation across conditioning regimes.

For each regime the sampler runs with only that regime's conditions
present; masked-region reconstruction error is measured against the
known ground truth of the synthetic corpus, and a sync score checks
that the generated stream tracks the conditioning stream through the
dataset's energy law.  Items are pure functions of (corpus seed, item
index, regime), so results are identical however many workers run.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .. import rng
from ..data import build_corpus, smoothed_energy
from ..flow import SamplingConditions, sample_pair

EVAL_HEADER = "regime,audio_mse,motion_mse,sync_corr,n_samples"

REGIMES = (
    "uncond",
    "audio_to_motion",
    "motion_to_audio",
    "motion_text_to_audio",
    "text_to_both",
    "text_refaudio_to_both",
)


def regime_conditions(regime, sample):
    """Build SamplingConditions for one corpus sample under a regime.
    Returns (conds, audio_scored, motion_scored): which streams count
    toward masked-region MSE (True = that stream was generated)."""
    la = sample.audio.shape[0]
    if regime == "uncond":
        return SamplingConditions(), True, True
    if regime == "audio_to_motion":
        return SamplingConditions(audio=sample.audio), False, True
    if regime == "motion_to_audio":
        return SamplingConditions(motion=sample.motion), True, False
    if regime == "motion_text_to_audio":
        return SamplingConditions(motion=sample.motion,
                                  text_tokens=sample.text_tokens), True, False
    if regime == "text_to_both":
        return SamplingConditions(text_tokens=sample.text_tokens), True, True
    if regime == "text_refaudio_to_both":
        known = np.zeros(la, dtype=bool)
        known[: la // 2] = True
        return SamplingConditions(audio=sample.audio, audio_known=known,
                                  text_tokens=sample.text_tokens), True, True
    raise ValueError(f"unknown regime '{regime}'")


def _corr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0 or a.size < 2:
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def _sync_score(regime, sample, gen_audio, gen_motion):
    lm = sample.motion.shape[0]
    if regime in ("audio_to_motion", "text_refaudio_to_both"):
        ref, _ = smoothed_energy(sample.audio, lm)
        return _corr(gen_motion[:, 0], ref)
    if regime in ("motion_to_audio", "motion_text_to_audio"):
        got, _ = smoothed_energy(gen_audio, lm)
        return _corr(got, sample.motion[:, 0])
    got, _ = smoothed_energy(gen_audio, lm)
    return _corr(got, gen_motion[:, 0])


def _eval_item(model, scfg, regime, sample, seed):
    conds, score_a, score_m = regime_conditions(regime, sample)
    lm = sample.motion.shape[0]
    item_cfg = replace(scfg, seed=seed)
    gen_audio, gen_motion = sample_pair(model, conds, lm, item_cfg)
    if regime == "text_refaudio_to_both":
        gen_region = ~np.asarray(conds.audio_known)
    else:
        gen_region = np.ones(sample.audio.shape[0], dtype=bool)
    audio_mse = (
        float(((gen_audio[gen_region] - sample.audio[gen_region]) ** 2).mean())
        if score_a else 0.0
    )
    motion_mse = float(((gen_motion - sample.motion) ** 2).mean()) if score_m else 0.0
    return audio_mse, motion_mse, _sync_score(regime, sample, gen_audio, gen_motion)


def worker_count():
    raw = os.environ.get("JAMFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def eval_model(model, rc, corpus_seed, n_samples):
    """Returns one row dict per regime, in REGIMES order."""
    corpus = build_corpus(corpus_seed, model.cfg, n_samples,
                          rc.data.lm_min, rc.data.lm_max)
    jobs = [(regime, i) for regime in REGIMES for i in range(n_samples)]

    def run(job):
        regime, i = job
        seed = rng.derive_seed(corpus_seed, "eval", regime, i)
        return job, _eval_item(model, rc.sampler, regime, corpus[i], seed)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(run, jobs))
    else:
        results = dict(run(j) for j in jobs)

    rows = []
    for regime in REGIMES:
        vals = [results[(regime, i)] for i in range(n_samples)]
        rows.append({
            "regime": regime,
            "audio_mse": float(np.mean([v[0] for v in vals])),
            "motion_mse": float(np.mean([v[1] for v in vals])),
            "sync_corr": float(np.mean([v[2] for v in vals])),
            "n_samples": n_samples,
        })
    return rows


def write_report(rows, path):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(EVAL_HEADER + "\n")
        for r in rows:
            f.write(f"{r['regime']},{r['audio_mse']:.6f},{r['motion_mse']:.6f},"
                    f"{r['sync_corr']:.6f},{r['n_samples']}\n")
