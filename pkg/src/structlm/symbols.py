"""Reserved tokens and parser-action helpers shared across modules."""

from functools import lru_cache

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
PAD = "<pad>"

SB = "SB"
SE = "SE"
TOP = "TOP"
TOP_PRIME = "TOP'"
PRIME = "'"

NULL = "null"
UNARY = "unary"
ADJOIN_LEFT = "adjoin-left"
ADJOIN_RIGHT = "adjoin-right"

PREDICTOR = "PREDICTOR"
TAGGER = "TAGGER"
PARSER = "PARSER"


def unary(label):
    return f"{UNARY}:{label}"


def adjoin_left(label):
    return f"{ADJOIN_LEFT}:{label}"


def adjoin_right(label):
    return f"{ADJOIN_RIGHT}:{label}"


@lru_cache(maxsize=None)
def split_action(action):
    """Return (kind, label) for an action token; label is None for null."""
    if action == NULL:
        return NULL, None
    kind, sep, label = action.partition(":")
    if not sep or kind not in (UNARY, ADJOIN_LEFT, ADJOIN_RIGHT) or not label:
        raise ValueError(f"malformed parser action {action!r}")
    return kind, label


def all_actions(nt_labels):
    """The modeled parser alphabet: every non-forced action over nt_labels."""
    acts = [NULL]
    for label in nt_labels:
        acts += [unary(label), adjoin_left(label), adjoin_right(label)]
    return acts


def fmt_num(x):
    """Shortest text that reads back to the same float; integers without '.0'."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)
