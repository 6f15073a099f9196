"""Treebank reading, headword percolation and binarization.

Raw bracketed trees are turned into complete binary parses: traces are
removed, the sentence is wrapped as (TOP (SB <s>) ... (SE </s>)), every
constituent gets a head child from the percolation table, and n-ary
constituents are binarized with the scheme named in the binarization table.
"""

import re
from dataclasses import dataclass, field
from importlib import resources

from .symbols import BOS, EOS, PRIME, SB, SE, TOP

PUNCT_TAGS = frozenset([".", ",", "''", "``", "`", "'", ":", "LRB", "RRB"])
_TOKEN = re.compile(r"\(|\)|[^\s()]+")


class TreebankError(ValueError):
    pass


class BracketParseError(TreebankError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class MalformedNodeError(TreebankError):
    pass


class RuleConfigError(TreebankError):
    pass


class PercolationError(TreebankError):
    pass


@dataclass
class RawTree:
    label: str
    children: list = field(default_factory=list)
    word: str = None

    @property
    def is_leaf(self):
        return self.word is not None

    def leaves(self):
        if self.is_leaf:
            return [(self.word, self.label)]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def __str__(self):
        if self.is_leaf:
            return f"({self.label} {self.word})"
        return f"({self.label} " + " ".join(str(c) for c in self.children) + ")"


def base_label(label):
    """Strip functional annotations: NP-SBJ-1 -> NP, NP=2 -> NP, -LRB- -> LRB."""
    if label == "-NONE-":
        return label
    if label.startswith("-") and label.endswith("-") and len(label) > 2:
        return label[1:-1]
    label = label.split("|")[0]
    m = re.search(r"[-=]", label[1:])
    return label[: m.start() + 1] if m else label


def _tokens(text):
    for m in _TOKEN.finditer(text):
        yield m.group(), m.start()


def parse_bracketed(text, strip_functional=True):
    """Parse one or more bracketed trees; an unlabeled outer wrapper is dropped."""
    trees = []
    stack = []  # [label, children, word, offset]
    for tok, pos in _tokens(text):
        if tok == "(":
            stack.append([None, [], None, pos])
        elif tok == ")":
            if not stack:
                raise BracketParseError("unbalanced ')'", pos)
            label, children, word, start = stack.pop()
            node = _make_node(label, children, word, start, strip_functional)
            if stack:
                stack[-1][1].append(node)
            elif node is not None:
                trees.append(node)
        else:
            if not stack:
                raise MalformedNodeError(f"bare token {tok!r} outside brackets (leaf without POS) at offset {pos}")
            top = stack[-1]
            if top[0] is None and not top[1]:
                top[0] = tok
            elif top[2] is None and not top[1]:
                top[2] = tok
            else:
                raise MalformedNodeError(f"unexpected token {tok!r} at offset {pos}: leaf without POS")
    if stack:
        raise BracketParseError("unbalanced: missing ')'", len(text))
    return trees


def _make_node(label, children, word, start, strip_functional):
    if label is None:
        # unlabeled wrapper, as in the treebank's "( (S ...) )"
        if word is not None or len(children) != 1:
            raise MalformedNodeError(f"unlabeled node at offset {start} must wrap exactly one tree")
        return children[0]
    if strip_functional:
        label = base_label(label)
    if word is not None and children:
        raise MalformedNodeError(f"node at offset {start} mixes a word with subtrees")
    if word is None and not children:
        raise MalformedNodeError(f"empty node {label!r} at offset {start}")
    return RawTree(label, children, word)


def remove_traces(tree):
    """Delete -NONE- subtrees and any constituent left with an empty yield."""
    if tree.is_leaf:
        return None if tree.label == "-NONE-" else tree
    kids = [k for k in (remove_traces(c) for c in tree.children) if k is not None]
    if not kids:
        return None
    return RawTree(tree.label, kids)


def remove_punctuation(tree):
    if tree.is_leaf:
        return None if tree.label in PUNCT_TAGS else tree
    kids = [k for k in (remove_punctuation(c) for c in tree.children) if k is not None]
    if not kids:
        return None
    return RawTree(tree.label, kids)


def lowercase_words(tree):
    if tree.is_leaf:
        return RawTree(tree.label, word=tree.word.lower())
    return RawTree(tree.label, [lowercase_words(c) for c in tree.children])


def wrap_sentence(tree):
    return RawTree(TOP, [RawTree(SB, word=BOS), tree, RawTree(SE, word=EOS)])


# ---------------------------------------------------------------------------
# rule tables


def _data_text(name):
    return resources.files("structlm").joinpath("data").joinpath(name).read_text(encoding="utf-8")


def _rule_lines(text):
    """Yield (first_line_no, tokens) per entry; indented lines continue an entry."""
    entry = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("##"):
            continue
        if line[0].isspace():
            if entry is None:
                raise RuleConfigError(f"line {lineno}: continuation without an entry")
            entry[1].extend(line.split())
        else:
            if entry is not None:
                yield entry
            entry = (lineno, line.split())
    if entry is not None:
        yield entry


class Pattern:
    """One ranked pattern: a label item, a match-list or a negated match-list."""

    def __init__(self, text):
        self.text = text
        self.negated = False
        body = text
        if text.startswith("<"):
            if not text.endswith(">"):
                raise RuleConfigError(f"unterminated pattern {text!r}")
            body = text[1:-1]
            if body.startswith("^"):
                self.negated = True
                body = body[1:]
            items = body.split("|")
        else:
            items = [body]
        self.items = set()
        for item in items:
            if len(item) < 2 or item[0] not in "_~":
                raise RuleConfigError(f"pattern item {item!r} must start with _ or ~")
            self.items.add((item[0] == "_", item[1:]))

    def matches(self, label, is_terminal):
        hit = (is_terminal, label) in self.items
        return not hit if self.negated else hit

    def __repr__(self):
        return f"Pattern({self.text!r})"


class PercolationRules:
    def __init__(self, entries):
        self.entries = entries  # label -> (direction, [Pattern])

    @classmethod
    def parse(cls, text):
        entries = {}
        for lineno, toks in _rule_lines(text):
            if len(toks) < 2 or toks[1] not in ("left", "right"):
                raise RuleConfigError(f"line {lineno}: expected 'LABEL left|right patterns...'")
            entries[toks[0]] = (toks[1], [Pattern(t) for t in toks[2:]])
        return cls(entries)

    @classmethod
    def default(cls):
        return cls.parse(_data_text("headword_rules.txt"))

    def head_position(self, label, children):
        """children: list of (label, is_terminal). Returns the head index."""
        if label not in self.entries:
            raise RuleConfigError(f"no headword percolation rule for label {label!r}")
        if len(children) == 1:
            return 0
        direction, patterns = self.entries[label]
        order = range(len(children)) if direction == "left" else range(len(children) - 1, -1, -1)
        for pat in patterns:
            for i in order:
                if pat.matches(*children[i]):
                    return i
        kids = " ".join(l for l, _ in children)
        raise PercolationError(f"no child of ({label} {kids}) matches a percolation pattern")


class BinarizationRules:
    def __init__(self, schemes):
        self.schemes = schemes

    @classmethod
    def parse(cls, text):
        schemes = {}
        for lineno, toks in _rule_lines(text):
            if len(toks) != 2 or toks[1] not in ("A", "B"):
                raise RuleConfigError(f"line {lineno}: expected 'LABEL A|B'")
            schemes[toks[0]] = toks[1]
        return cls(schemes)

    @classmethod
    def default(cls):
        return cls.parse(_data_text("binarization_rules.txt"))

    def scheme(self, label):
        try:
            return self.schemes[label]
        except KeyError:
            raise RuleConfigError(f"no binarization rule for label {label!r}") from None


# ---------------------------------------------------------------------------
# headed trees


@dataclass
class HeadedTree:
    """n-ary tree with the head child of every constituent marked."""

    label: str
    children: list = field(default_factory=list)
    head: int = 0
    word: str = None
    position: int = -1  # leaf index in the sentence

    @property
    def is_leaf(self):
        return self.word is not None

    @property
    def head_leaf(self):
        node = self
        while not node.is_leaf:
            node = node.children[node.head]
        return node


def percolate_headwords(tree, rules, start=0):
    """Mark head children bottom-up; leaves are numbered from `start`."""
    counter = [start]

    def walk(node):
        if node.is_leaf:
            out = HeadedTree(node.label, word=node.word, position=counter[0])
            counter[0] += 1
            return out
        kids = [walk(c) for c in node.children]
        head = rules.head_position(node.label, [(k.label, k.is_leaf) for k in kids])
        return HeadedTree(node.label, kids, head)

    return walk(tree)


@dataclass(frozen=True, slots=True)
class HeadedBinaryTree:
    """Binary constituent annotated with its headword, head POS and head origin.

    Leaves carry the POS tag as label and have no children. head_origin is
    0 when the head comes from the left child and 1 from the right one.
    """

    label: str
    head_word: str
    head_pos: str
    head_origin: int = 0
    children: tuple = ()
    head_index: int = field(default=-1, compare=False)

    @property
    def is_leaf(self):
        return not self.children

    @property
    def nt_label(self):
        return self.label

    def leaves(self):
        if self.is_leaf:
            return [self]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def words(self):
        return [l.head_word for l in self.leaves()]

    def nodes(self):
        yield self
        for c in self.children:
            yield from c.nodes()


def leaf(word, pos, index=-1):
    return HeadedBinaryTree(pos, word, pos, 0, (), index)


def join(label, left, right, origin):
    src = left if origin == 0 else right
    return HeadedBinaryTree(label, src.head_word, src.head_pos, origin, (left, right), src.head_index)


def unary_node(label, child):
    return HeadedBinaryTree(label, child.head_word, child.head_pos, 0, (child,), child.head_index)


def binarize(tree, rules):
    """Binarize a headed n-ary tree into a HeadedBinaryTree."""
    if tree.is_leaf:
        return leaf(tree.word, tree.label, tree.position)
    label = tree.label
    node = tree
    while len(node.children) == 1 and not node.children[0].is_leaf:
        node = node.children[0]  # Z -> Y with Y an NT: keep Z only
    kids = [binarize(c, rules) for c in node.children]
    if len(kids) == 1:
        return unary_node(label, kids[0])
    k = node.head
    prime = label + PRIME
    cur = kids[k]
    if rules.scheme(label) == "A":
        for r in kids[k + 1:]:
            cur = join(prime, cur, r, 0)
        for l in reversed(kids[:k]):
            cur = join(prime, l, cur, 1)
    else:
        for l in reversed(kids[:k]):
            cur = join(prime, l, cur, 1)
        for r in kids[k + 1:]:
            cur = join(prime, cur, r, 0)
    return HeadedBinaryTree(label, cur.head_word, cur.head_pos, cur.head_origin, cur.children, cur.head_index)


class TreePipeline:
    """Raw treebank tree -> complete binary parse including <s> and </s>."""

    def __init__(self, percolation=None, binarization=None, drop_punctuation=False, lowercase=False):
        self.percolation = percolation or PercolationRules.default()
        self.binarization = binarization or BinarizationRules.default()
        self.drop_punctuation = drop_punctuation
        self.lowercase = lowercase

    def __call__(self, raw):
        tree = remove_traces(raw)
        if tree is not None and self.drop_punctuation:
            tree = remove_punctuation(tree)
        if tree is None:
            return None
        if self.lowercase:
            tree = lowercase_words(tree)
        headed = percolate_headwords(wrap_sentence(tree), self.percolation)
        return binarize(headed, self.binarization)


# ---------------------------------------------------------------------------
# binarized tree text format


def format_tree(tree):
    """Bracket text; internal nodes are annotated label~headword~headpos~bit."""
    if tree.is_leaf:
        return f"({tree.label} {tree.head_word})"
    tag = f"{tree.label}~{tree.head_word}~{tree.head_pos}~{tree.head_origin}"
    return f"({tag} " + " ".join(format_tree(c) for c in tree.children) + ")"


def parse_tree(text):
    """Inverse of format_tree for one or more trees."""
    raws = parse_bracketed(text, strip_functional=False)
    return [_annotated(r, [0]) for r in raws]


def _annotated(raw, counter):
    if raw.is_leaf:
        out = leaf(raw.word, raw.label, counter[0])
        counter[0] += 1
        return out
    parts = raw.label.rsplit("~", 3)
    if len(parts) != 4 or parts[3] not in ("0", "1"):
        raise MalformedNodeError(f"internal node label {raw.label!r} is not label~headword~headpos~bit")
    label, word, pos, bit = parts
    kids = tuple(_annotated(c, counter) for c in raw.children)
    if len(kids) > 2 or (len(kids) == 1 and not kids[0].is_leaf):
        raise MalformedNodeError(f"node {raw.label!r} is neither binary nor a unary over a POS leaf")
    origin = int(bit)
    src = kids[origin] if len(kids) == 2 else kids[0]
    if (src.head_word, src.head_pos) != (word, pos):
        raise MalformedNodeError(f"node {raw.label!r} head disagrees with its child")
    return HeadedBinaryTree(label, word, pos, origin, kids, src.head_index)


def read_trees(path):
    with open(path, encoding="utf-8") as fh:
        return parse_tree(fh.read())


def write_trees(path, trees):
    with open(path, "w", encoding="utf-8") as fh:
        for t in trees:
            fh.write(format_tree(t) + "\n")


def tree_to_derivation(tree):
    """The unique elementary-event sequence generating a complete parse."""
    from .slm import tree_to_derivation as _impl

    return _impl(tree)
