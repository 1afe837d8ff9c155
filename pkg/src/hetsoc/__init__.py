"""Planner and discrete-event simulator for GPU+NPU LLM inference on mobile SoCs."""

__version__ = "0.1.0"
