import math

import pytest
from hypothesis import given, strategies as st

from distileval.errors import ConfigError
from distileval.schedules import (
    KeepRateConfig,
    LRConfig,
    cosine_annealing_lr,
    keep_rate,
    learning_rate,
    schedule_table,
)

KR = KeepRateConfig()
LR = LRConfig()


def keep_rate_oracle(cfg, i):
    # straight transcription of the three-phase pseudo-code with math.ceil
    if i < cfg.W:
        return 1.0
    if i < cfg.S:
        return max(cfg.p_min, 1 - cfg.gamma * math.ceil((i - cfg.W) / cfg.T))
    return cfg.p_final


@pytest.mark.parametrize("i, expected", [(25, 1.0), (300, 0.9), (2600, 0.5), (3500, 0.8)])
def test_keep_rate_examples(i, expected):
    assert keep_rate(KR, i) == pytest.approx(expected, rel=1e-12)


def test_keep_rate_matches_pseudocode_everywhere():
    for i in range(KR.N):
        assert keep_rate(KR, i) == pytest.approx(keep_rate_oracle(KR, i), abs=1e-15)


def test_keep_rate_phase_boundaries():
    assert keep_rate(KR, KR.W - 1) == 1.0
    # ceil(0 / T) == 0: the first decay epoch still keeps everything
    assert keep_rate(KR, KR.W) == 1.0
    assert keep_rate(KR, KR.W + 1) == pytest.approx(0.9)
    assert keep_rate(KR, KR.S - 1) == 0.5
    assert keep_rate(KR, KR.S) == 0.8


def test_keep_rate_out_of_range():
    with pytest.raises(IndexError):
        keep_rate(KR, -1)
    with pytest.raises(IndexError):
        keep_rate(KR, KR.N)


def test_keep_rate_monotone_and_value_set():
    values = [keep_rate(KR, i) for i in range(KR.W, KR.S)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    for i in range(KR.N):
        p = keep_rate(KR, i)
        assert p == 1.0 or KR.p_min <= p < 1.0 or p == KR.p_final
    assert {keep_rate(KR, i) for i in range(KR.S, KR.N)} == {KR.p_final}


@pytest.mark.parametrize(
    "kwargs",
    [dict(gamma=0.0), dict(gamma=1.0), dict(p_min=0.0), dict(p_final=1.5), dict(T=0), dict(W=-1),
     dict(W=3000, S=3000), dict(S=5000, N=4000)],
)
def test_keep_rate_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        KeepRateConfig(**kwargs)


def lr_oracle(cfg, i):
    t = cfg.T if i < cfg.S else cfg.S
    lam_i = cfg.lam ** math.floor(min(i, cfg.S) / cfg.T)
    r = math.fmod(i, t)
    if r <= cfg.T_warm:
        return lam_i * (r / cfg.T_warm) * cfg.lr_max
    return 0.5 * lam_i * (1 + math.cos(math.pi * (r - cfg.T_warm) / (cfg.T_max - cfg.T_warm))) * cfg.lr_max


# i=800 frozen from direct evaluation: 0.5 * 0.8 * (1 + cos(pi * 250 / 950)) * 5e-5
@pytest.mark.parametrize("i, expected", [(0, 0.0), (25, 2.5e-5), (550, 4.0e-5), (800, 3.354563143251483e-05)])
def test_learning_rate_examples(i, expected):
    assert learning_rate(LR, i) == pytest.approx(expected, rel=1e-12, abs=0)


def test_learning_rate_matches_formula_oracle():
    for i in range(0, 4500):
        assert learning_rate(LR, i) == pytest.approx(lr_oracle(LR, i), rel=1e-12, abs=1e-300)


def test_learning_rate_warmup_boundary_uses_le():
    # phase == T_warm falls in the warmup branch and hits the (decayed) peak
    assert learning_rate(LR, 50) == pytest.approx(5e-5, rel=1e-12)
    assert learning_rate(LR, 550) == pytest.approx(0.8 * 5e-5, rel=1e-12)


def test_learning_rate_after_stabilization():
    # t = S after stabilization; decay exponent frozen at S // T = 6
    i = 3000
    assert learning_rate(LR, i) == 0.0
    assert learning_rate(LR, 3050) == pytest.approx(0.8**6 * 5e-5, rel=1e-12)


def test_learning_rate_zero_warmup_is_defined():
    cfg = LRConfig(T_warm=0)
    assert learning_rate(cfg, 0) == 0.0
    assert learning_rate(cfg, 1) > 0


@given(st.integers(min_value=0, max_value=LR.S - LR.T - 1))
def test_periodic_decay_law(i):
    assert learning_rate(LR, i + LR.T) == pytest.approx(LR.lam * learning_rate(LR, i), rel=1e-12, abs=0)


@given(st.integers(min_value=0, max_value=20000))
def test_learning_rate_bounds(i):
    assert 0.0 <= learning_rate(LR, i) <= LR.lr_max


@pytest.mark.parametrize("kwargs", [dict(lr_max=0.0), dict(lam=0.0), dict(lam=1.1), dict(T_warm=1000), dict(T_warm=-1)])
def test_lr_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        LRConfig(**kwargs)


def test_cosine_annealing_comparator():
    assert cosine_annealing_lr(1.0, 0, 100) == 1.0
    assert cosine_annealing_lr(1.0, 50, 100) == pytest.approx(0.5)
    assert cosine_annealing_lr(1.0, 99, 100) > 0


def test_schedule_table_rows():
    rows = schedule_table(KR, LR)
    assert len(rows) == KR.N
    assert rows[300] == (300, keep_rate(KR, 300), learning_rate(LR, 300))
