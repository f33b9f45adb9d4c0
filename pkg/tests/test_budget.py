import pytest

from salt import budget as B
from salt.errors import ConfigError
from salt.models import get_config, parameter_breakdown

# (N_enc, N_teacher, N_pred, D_enc, D_pred, D_teacher) in billions, and the printed total
TABLE = {
    "videomaev2-g14": ((1.1, 0.0, 0.012, 331.8, 165.9, 0.0), 2.2e21),
    "vjepa2-l16": ((0.303, 0.303, 0.022, 302.0, 3019.9, 1510.2), 1.9e21),
    "vjepa2-h16": ((0.632, 0.632, 0.022, 302.0, 3019.9, 1509.9), 3.5e21),
    "vjepa2-g16": ((1.012, 1.012, 0.022, 302.0, 3019.9, 1509.9), 5.3e21),
}


def oracle(ne, nt, np_, de, dp, dt):
    g = 1e9
    return 6 * ne * g * de * g + 6 * np_ * g * dp * g + 2 * nt * g * dt * g


@pytest.mark.parametrize("name", sorted(TABLE))
def test_reference_presets_within_three_percent(name):
    inputs, printed = TABLE[name]
    preset = B.get_preset(name)
    assert preset.spec.total() == pytest.approx(oracle(*inputs), rel=1e-12)
    assert abs(preset.residual()) < 0.03
    assert preset.spec.total() == pytest.approx(printed, rel=0.03)


def test_salt_rows_expose_their_residual():
    # the printed SALT totals are not reproducible from the printed N and D
    rows = {"salt-l16": (0.3, 1.2e21), "salt-h16": (0.6, 1.5e21), "salt-g16": (1.0, 1.8e21),
            "salt-G16": (1.8, 2.6e21)}
    for name, (ne, printed) in rows.items():
        preset = B.get_preset(name)
        residual = oracle(ne, 0.303, 0.022, 154.1, 1541.4, 770.7) / printed - 1
        assert preset.residual() == pytest.approx(residual, rel=1e-9)
        assert residual < -0.05
        assert preset.note
    assert B.get_preset("salt-l16").residual() == pytest.approx(-0.2101, abs=1e-4)


def test_token_counts_per_role():
    assert B.token_count(100, 0.9, "encoder", batch=2, steps=3, masks=2) == pytest.approx(120.0)
    assert B.token_count(100, 0.9, "predictor", batch=2, steps=3, masks=2) == 1200.0
    assert B.token_count(100, 0.9, "teacher", batch=2, steps=3, masks=2) == 600.0
    with pytest.raises(ConfigError):
        B.token_count(100, 1.0, "encoder")
    with pytest.raises(ConfigError):
        B.token_count(100, 0.5, "critic")


def test_model_flops_uses_registry_counts():
    cfg = get_config("vit-l")
    counts = parameter_breakdown(cfg)
    spec = B.model_flops(cfg, steps=10, batch=4, mask_ratio=0.9)
    n = cfg.num_tokens
    expected = 6 * counts["encoder"] * 0.1 * n * 40 + 6 * counts["predictor"] * n * 40 + 2 * counts["encoder"] * n * 40
    assert spec.total() == pytest.approx(expected)
    s1 = B.model_flops(cfg, steps=10, batch=4, stage="stage1")
    assert s1.components()["teacher_forward"] == 0.0 and s1.components()["decoder"] > 0


def test_negative_inputs_and_unknown_preset():
    with pytest.raises(ConfigError):
        B.train_flops(-1, 10)
    with pytest.raises(ConfigError):
        B.teacher_forward_flops(1, -10)
    with pytest.raises(ConfigError):
        B.get_preset("gpt-5")


def test_allocation_plan():
    plan = B.AllocationPlan.from_fractions(120)
    assert plan.splits == [(10, 110), (15, 105), (30, 90), (40, 80), (60, 60)]
    plan.validate()
    with pytest.raises(ConfigError):
        B.AllocationPlan(10, [(0, 10)]).validate()
    with pytest.raises(ConfigError):
        B.AllocationPlan(10, [(3, 3)]).validate()
