"""Test basic package functionality and imports."""

import pytest


def test_package_imports():
    """Test that the main package components can be imported."""
    try:
        from pydpcflow import EdgeController, ExperimentConfig, WorkflowEngine, run_experiment

        assert EdgeController is not None
        assert ExperimentConfig is not None
        assert WorkflowEngine is not None
        assert run_experiment is not None
    except ImportError as e:
        pytest.fail(f"Failed to import package components: {e}")


def test_enums_import():
    """Test that enums can be imported."""
    try:
        from pydpcflow import FrameKind, ImageKind, Method, PlantKind, TruncationMode, WorkflowMode

        assert TruncationMode.RANK_ONLY.value == "rank-only"
        assert ImageKind.EXPORT.value == "D"
        assert Method("workflow+dob") is Method.WORKFLOW_DOB
        assert PlantKind("ball-beam") is PlantKind.BALL_BEAM
        assert WorkflowMode.DPC is not None
        assert FrameKind.START is not None
    except ImportError as e:
        pytest.fail(f"Failed to import enums: {e}")


def test_version():
    import pydpcflow

    assert pydpcflow.__version__ == "0.1.0"
    assert set(pydpcflow.__all__) <= set(dir(pydpcflow))


def test_default_config_is_ball_beam():
    """The default configuration validates without any file."""
    from pydpcflow import ExperimentConfig, PlantKind

    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.plant == PlantKind.BALL_BEAM
    assert cfg.dims() == (1, 1)
