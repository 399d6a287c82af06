import pytest

from coedge import model as model_mod


@pytest.fixture(scope="session")
def tiny_model():
    return model_mod.build_model(model_mod.tiny_config(), seed=3)


@pytest.fixture(scope="session")
def desk_model():
    """The default desk-scale configuration (8 layers, hidden 256, V=260)."""
    return model_mod.build_model(model_mod.default_config(), seed=7)


@pytest.fixture(scope="session")
def tiny_model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "tiny.celm"
    model_mod.generate_model(model_mod.tiny_config(), 3, str(path))
    return str(path)
