import pytest

from painnet.gradcheck import LAYERS, run_gradchecks


def test_layer_coverage():
    expected = {"gru", "stacked_gru", "batchnorm", "relation_mlp", "loss.wbce", "loss.bce",
                "stat.all", "cmp.euccos", "cmp.subt", "cmp.mult", "cmp.nn", "cmp.submultnn"}
    assert expected <= set(LAYERS)
    assert {f"stat.{op}" for op in ("mean", "median", "std", "lse", "min", "max")} <= set(LAYERS)


@pytest.mark.parametrize("layer", LAYERS)
def test_layer_passes_ten_seeds(layer):
    (res,) = run_gradchecks([layer], seeds=10)
    assert res.passed, res.line()
    assert len(res.reports) == 10


@pytest.mark.parametrize("layer", ["gru", "stat.median", "cmp.euccos", "loss.wbce"])
def test_mutation_is_caught(layer):
    results = run_gradchecks(["batchnorm", layer], seeds=2, corrupt=layer)
    assert results[0].passed
    assert not results[1].passed and results[1].line().startswith(f"FAIL {layer}")


def test_unknown_layer():
    with pytest.raises(ValueError):
        run_gradchecks(["lstm"])
