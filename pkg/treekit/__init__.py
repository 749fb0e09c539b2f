"""treekit - classical and learned decision-tree induction."""

__version__ = "0.1.0"

FORMAT_VERSION = 1
