"""Joint entity and relation extraction with weighted soft-logic rules."""
from . import autodiff, corpus, encoder, logic, rules, trainer

__version__ = "0.1.0"

__all__ = ["autodiff", "corpus", "encoder", "logic", "rules", "trainer"]
