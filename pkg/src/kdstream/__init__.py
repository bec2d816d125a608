"""Two-step distillation of a full-context acoustic model into a small streaming one."""

__version__ = "0.1.0"
