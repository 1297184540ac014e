import pytest

from diagchat.llm import TemplateCatalog

from helpers import make_kb


@pytest.fixture(scope="session")
def catalog() -> TemplateCatalog:
    return TemplateCatalog.load_default()


@pytest.fixture()
def fixture_kb():
    return make_kb()
