import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from erpflow import datagen, expert, seqmoe  # noqa: E402

SMALL_EXPERT = expert.ExpertConfig(embed_dim=16, gnn_rounds=2, attn_layers=1, attn_heads=2, max_atoms=40)
SMALL_TRAIN = seqmoe.SeqTrainConfig(warmup_iters=3, n_experts=4, t_per_expert=2, max_total_iters=8,
                                    chief_iters=6, batch_size=16, lr=3e-3, lr_warmup_steps=5)


@pytest.fixture(scope="session")
def small_corpus():
    spec = datagen.CorpusSpec({"substitution": 0.8, "silylation": 0.2}, total=150, conflict_fraction=0.3, seed=1)
    return datagen.generate_corpus(spec)


@pytest.fixture(scope="session")
def small_examples(small_corpus):
    return expert.examples_from(small_corpus.train)


@pytest.fixture(scope="session")
def small_registry(small_examples):
    return seqmoe.train_registry(small_examples, SMALL_EXPERT, SMALL_TRAIN)


# -- acceptance reporting ------------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class criterion:
    """Context manager that records PASS/FAIL plus measured values for one acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        ACCEPTANCE[self.number] = (status, self.title, "; ".join(self.details))
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, details = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{details}]" if details else ""))
