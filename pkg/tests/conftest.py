import numpy as np
import pytest

from medtr import data as data_mod
from medtr import model as med_model


@pytest.fixture(scope="session")
def vocab():
    return data_mod.make_vocab()


@pytest.fixture(scope="session")
def lang_specs(vocab):
    return data_mod.make_lang_specs(vocab, seed=7)


@pytest.fixture(scope="session")
def tiny_cs_corpus(vocab, lang_specs):
    corpus = data_mod.gen_code_switching(
        lang_specs["A"], lang_specs["B"], 30, 0.3, 0.69, seed=21
    )
    data_mod.normalize({"train": corpus}, "train")
    return corpus


@pytest.fixture(scope="session")
def toy_med(vocab):
    config = med_model.toy_config("med", vocab.size, data_mod.DEFAULT_D_FEAT)
    return med_model.build_model(config, seed=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
