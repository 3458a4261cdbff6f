"""Federated prompt optimization with textual gradients."""

__version__ = "0.1.0"

from fedprompt.prompts import PromptState
from fedprompt.runtime import RunConfig, run

__all__ = ["PromptState", "RunConfig", "run", "__version__"]
