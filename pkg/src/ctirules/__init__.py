"""Threat-report to detection-rule pipeline.

Stages: technique knowledge base, model gateway, technique extraction,
procedure generation, Sigma rule drafting with repair, and a Splunk-subset
detection harness.
"""

from __future__ import annotations

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
