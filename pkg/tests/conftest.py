import pytest

from faultex import faults, features, pipeline, templates, worldmodel


@pytest.fixture(scope="session")
def envs():
    return worldmodel.load_environments()


@pytest.fixture(scope="session")
def kitchen(envs):
    return envs["kitchen"]


@pytest.fixture(scope="session")
def office(envs):
    return envs["office"]


@pytest.fixture(scope="session")
def tax():
    return faults.default_taxonomy()


@pytest.fixture(scope="session")
def book():
    return templates.default_phrases()


@pytest.fixture(scope="session")
def vocab(envs, tax, book):
    return features.build_vocab(pipeline.corpus_for(envs, tax, book))
