"""skillc: compile portable agent skill packages into target-specialized
variants and execute them with code solidification, adaptive recompilation,
and resource-aware parallel scheduling."""

__version__ = "0.1.0"
