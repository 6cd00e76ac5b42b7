import pytest

from kvpool.core.exceptions import ConfigError
from kvpool.core.settings import resolve_settings
from kvpool.engine import EngineTimingModel, build_batching_config, build_timing_model


def test_default_coefficients():
    timing = EngineTimingModel()
    assert timing.prefill_cost(1024, 1024) == pytest.approx(3.0e-5 * 1024 + 5.0e-9 * 1024**2)
    assert timing.prefill_cost(0, 1024) == 0.0
    assert timing.decode_step_cost(1) == pytest.approx(0.0202)
    assert timing.decode_step_cost(8) > timing.decode_step_cost(1)
    assert timing.dram_fetch_cost(0) == 0.0
    assert timing.dram_fetch_cost(10) == pytest.approx(4.0e-3 + 10 * 4.4e-4)


def test_prefill_cost_grows_with_context():
    timing = EngineTimingModel()
    assert timing.prefill_cost(100, 2000) > timing.prefill_cost(100, 100)


@pytest.mark.parametrize("field", ["alpha_p", "gamma_p", "alpha_d", "delta_d", "swap_cost_per_block"])
def test_non_positive_coefficients_rejected(field):
    with pytest.raises(ConfigError):
        EngineTimingModel(**{field: 0.0})


def test_build_from_settings():
    settings = resolve_settings({"engine": {"timing": {"alpha_d": 0.05}, "max_batch_size": 2}})
    assert build_timing_model(settings).alpha_d == 0.05
    assert build_batching_config(settings).max_batch_size == 2


def test_unknown_timing_field():
    settings = resolve_settings({"engine": {"timing": {"beta": 1.0}}})
    with pytest.raises(ConfigError, match="engine.timing"):
        build_timing_model(settings)
