from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sona import config as C
from sona.substrate import ConfigError


def test_defaults_round_trip():
    cfg = C.PipelineConfig()
    assert C.from_text(C.to_text(cfg)) == cfg
    assert cfg.diffusion.T == 50 and cfg.sona.s == 10.0 and cfg.sona.lam == 0.2


@given(
    s=st.floats(0, 50),
    lam=st.floats(0, 0.49),
    tilde=st.one_of(st.just("uniform"), st.integers(0, 50)),
    seed=st.integers(0, 2**31),
    beta=st.floats(0, 5),
    literal=st.booleans(),
)
def test_round_trip_property(s, lam, tilde, seed, beta, literal):
    cfg = C.with_overrides(C.PipelineConfig(), sona__s=s, sona__lam=lam, sona__tilde_t=tilde, run__seed=seed, detector__beta=beta, detector__literal_oe=literal)
    back = C.from_text(C.to_text(cfg))
    assert back == cfg and C.config_hash(back) == C.config_hash(cfg)


def test_partial_file_uses_defaults():
    cfg = C.from_text("[sona]\nlam = 0.1\n")
    assert cfg.sona.lam == 0.1 and cfg.sona.s == 10.0


@pytest.mark.parametrize(
    "text, match",
    [
        ("[nope]\nx = 1\n", "unknown section"),
        ("[sona]\nlamda = 0.1\n", "unknown key"),
        ("[sona]\nlam = abc\n", "cannot parse"),
        ("[sona]\nlam = 0.7\n", "lambda"),
        ("[diffusion]\nbeta_start = 0.5\nbeta_end = 0.1\n", "schedule"),
        ("[sona]\nprompt_policy = nearest\n", "prompt_policy"),
        ("[sona]\ntilde_t = 99\n", "tilde_t"),
        ("[eval]\ntpr = 0\n", "tpr"),
        ("[detector]\nmi_ramp = 2\n", "mi_ramp"),
        ("[data]\nid_classes = circle, ring\n", "overlap|disjoint|near"),
        ("not ini", "no section|header"),
    ],
)
def test_bad_files(text, match):
    with pytest.raises(ConfigError, match=match):
        C.from_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        C.load_config(tmp_path / "none.ini")


def test_save_and_load(tmp_path):
    cfg = C.with_overrides(C.PipelineConfig(), run__seed=4)
    C.save_config(cfg, tmp_path / "c.ini")
    assert C.load_config(tmp_path / "c.ini") == cfg


def test_stage_hashes_are_scoped():
    base = C.PipelineConfig()
    det = C.with_overrides(base, detector__beta=1.0)
    assert C.diffusion_hash(det) == C.diffusion_hash(base)
    assert C.outlier_hash(det, "sona") == C.outlier_hash(base, "sona")
    assert C.detector_hash(det, "full", "sona") != C.detector_hash(base, "full", "sona")
    assert C.config_hash(det) != C.config_hash(base)
    seeded = C.with_overrides(base, run__seed=1)
    assert C.diffusion_hash(seeded) == C.diffusion_hash(base)
    assert C.outlier_hash(seeded, "sona") != C.outlier_hash(base, "sona")
    assert C.outlier_hash(base, "sona") != C.outlier_hash(base, "global")
    moved = C.with_overrides(base, run__workdir="elsewhere")
    assert C.config_hash(moved) == C.config_hash(base)


def test_detector_config_maps_to_train_config():
    tc = C.DetectorConfig(beta=0.3, gamma_mi=0.2, mi_ramp=0.0).train_config()
    assert (tc.beta, tc.gamma_mi, tc.mi_ramp) == (0.3, 0.2, 0.0)
