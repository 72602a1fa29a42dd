import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mercatran import preprocess as pp
from mercatran.datamodel import EventRecord, EventType, ItemSnapshot, reconstruct_sequences
from mercatran.model import MercatranModel, ModelConfig
from mercatran.synthgen import GenConfig, generate_corpus

_limits = threadpool_limits(1)


def make_item(item_id="i1", name="Red Shirt", brand_id=7, brand_name="Nike", c2_id=301, **kw):
    base = dict(c0_name="Men", c1_name="Tops", c2_name="T-shirts", c0_id=1, c1_id=20)
    base.update(kw)
    return ItemSnapshot(item_id=item_id, name=name, brand_id=brand_id, brand_name=brand_name, c2_id=c2_id, **base)


def make_event(user="u1", seq="s1", t=0, etype=EventType.ITEM_VIEW, item=None, **item_kw):
    return EventRecord(user_id=user, sequence_id=seq, stime=t, event_type=etype,
                       item=item if item is not None else make_item(**item_kw))


@pytest.fixture(scope="session")
def small_corpus():
    cfg = GenConfig(seed=5, n_users=80, n_items=300, n_brands=12)
    items, events = generate_corpus(cfg)
    return cfg, items, events


@pytest.fixture(scope="session")
def small_examples(small_corpus):
    _, items, events = small_corpus
    vocab = pp.build_vocab(items)
    exs = pp.sequences_to_examples(reconstruct_sequences(events))
    return vocab, pp.build_example_set(exs, vocab)


@pytest.fixture(scope="session")
def tiny_config(small_examples):
    vocab, _ = small_examples
    return ModelConfig(d=16, d_ff=32, h=4, n_blocks=1, vocab_size=len(vocab), batch_size=16, dropout=0.0,
                       warmup_steps=50)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return MercatranModel(tiny_config)


# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
