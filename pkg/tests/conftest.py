import sys
import os

import pytest

# Add project root to path FIRST so the local package wins over any installed copy
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

if project_root in sys.path:
    sys.path.remove(project_root)
sys.path.insert(0, project_root)

from profile_tuner.backend import MockBackend  # noqa: E402
from profile_tuner.pydantic_models import TraitDimension  # noqa: E402

from helpers import make_bank  # noqa: E402


@pytest.fixture
def ope_bank():
    """Ten Openness originals, each with a paraphrase twin."""
    return make_bank(10, TraitDimension.OPENNESS)


@pytest.fixture
def mock_backend():
    """Factory for uncached, responder-driven mock backends."""
    def _build(responder, model_id="mock"):
        return MockBackend(responder=responder, model_id=model_id)
    return _build
