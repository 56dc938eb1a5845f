import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pastakit.tokenizer import Tokenizer  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def tok() -> Tokenizer:
    return Tokenizer()


@pytest.fixture
def data_dir() -> Path:
    return DATA
