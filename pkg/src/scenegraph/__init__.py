"""Scene-graph generation toolkit: direction-aware message passing, a
priority-weighted object loss, a gated frequency prior for relationships,
recall/AP metrics and a synthetic corpus with planted structure.

Import submodules directly (``scenegraph.message_passing``, ...); the
package root stays free of numpy so the CLI can cap BLAS threads first.
"""
__version__ = "0.1.0"
