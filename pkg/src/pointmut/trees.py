"""Rooted trees with branch lengths, read from parenthesised (Newick-style) text."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator


class TreeFormatError(ValueError):
    pass


@dataclass
class TreeNode:
    name: str
    branch_length: float = 0.0
    children: list["TreeNode"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def breadth_first(self) -> Iterator["TreeNode"]:
        queue = [self]
        while queue:
            node = queue.pop(0)
            yield node
            queue.extend(node.children)

    def leaves(self) -> list["TreeNode"]:
        return [n for n in self.breadth_first() if n.is_leaf]

    def edges(self) -> Iterator[tuple["TreeNode", "TreeNode"]]:
        """``(parent, child)`` pairs in breadth-first order."""
        for node in self.breadth_first():
            for child in node.children:
                yield node, child

    def to_newick(self) -> str:
        def fmt(node: TreeNode, is_root: bool) -> str:
            inner = ""
            if node.children:
                inner = "(" + ",".join(fmt(c, False) for c in node.children) + ")"
            length = "" if is_root else f":{node.branch_length!r}"
            return f"{inner}{node.name}{length}"

        return fmt(self, True) + ";"


_TOKEN = re.compile(r"\s*(\(|\)|,|:|;|\[[^\]]*\]|[^()\[\],:;\s]+)")


def _tokenize(text: str) -> list[str]:
    tokens, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise TreeFormatError(f"unexpected character {text[pos]!r} at offset {pos}")
        tok = m.group(1)
        pos = m.end()
        if not tok.startswith("["):  # bracketed comments are ignored
            tokens.append(tok)
    return tokens


def parse_newick(text: str) -> TreeNode:
    """Parse ``((A:0.1,B:0.2)C:0.3,D:0.4)root;``. Unnamed nodes are named ``n<k>``."""
    tokens = _tokenize(text)
    if not tokens:
        raise TreeFormatError("empty tree")
    pos = 0
    counter = 0

    def peek() -> str | None:
        return tokens[pos] if pos < len(tokens) else None

    def take() -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise TreeFormatError("unexpected end of tree text")
        tok = tokens[pos]
        pos += 1
        return tok

    def node() -> TreeNode:
        nonlocal counter
        children = []
        if peek() == "(":
            take()
            children.append(node())
            while peek() == ",":
                take()
                children.append(node())
            if take() != ")":
                raise TreeFormatError("unbalanced parentheses")
        name = ""
        if peek() not in ("(", ")", ",", ":", ";", None):
            name = take()
        length = 0.0
        if peek() == ":":
            take()
            raw = take()
            try:
                length = float(raw)
            except ValueError:
                raise TreeFormatError(f"bad branch length {raw!r}") from None
            if not length >= 0:
                raise TreeFormatError(f"branch lengths must be non-negative, got {raw}")
        if not name:
            name = f"n{counter}"
            counter += 1
        return TreeNode(name, length, children)

    root = node()
    if peek() == ";":
        take()
    if pos != len(tokens):
        raise TreeFormatError(f"trailing tokens after tree: {tokens[pos:]}")
    root.branch_length = 0.0
    names = [n.name for n in root.breadth_first()]
    if len(set(names)) != len(names):
        raise TreeFormatError("node names must be unique")
    return root


def load_tree(path: str | Path) -> TreeNode:
    return parse_newick(Path(path).read_text())


def tree_from_edges(root: str, edges: dict[str, list[tuple[str, float]]]) -> TreeNode:
    """Build a tree from ``{parent: [(child, branch_length), ...]}``, rejecting cycles."""
    if root not in edges and not any(root == c for kids in edges.values() for c, _ in kids):
        raise TreeFormatError(f"root {root!r} does not appear in the edge list")
    seen: set[str] = set()

    def build(name: str, length: float) -> TreeNode:
        if name in seen:
            raise TreeFormatError(f"node {name!r} reached twice; edges contain a cycle or a merge")
        if length < 0:
            raise TreeFormatError(f"negative branch length into {name!r}")
        seen.add(name)
        return TreeNode(name, length, [build(c, float(b)) for c, b in edges.get(name, [])])

    tree = build(root, 0.0)
    orphans = set(edges) - seen
    if orphans:
        raise TreeFormatError(f"nodes not reachable from the root: {sorted(orphans)}")
    return tree


def star_tree(n_leaves: int, branch_length: float, root: str = "root") -> TreeNode:
    return TreeNode(root, 0.0, [TreeNode(f"leaf{i}", branch_length) for i in range(n_leaves)])
