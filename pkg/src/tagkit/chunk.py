"""Rule-based sound-event phrase extraction from captions.

A small deterministic tagger (closed-class words, a shipped content lexicon,
then suffix rules) feeds a regular chunk grammar::

    NP    = DT? JJ* (NN|NNS)+
    VP    = (VB|VBZ|VBP|VBG)+        auxiliaries are tagged as verbs
    NP_VP = NP VP                    when the VP starts right after the NP

NPs governed by a preposition ("in the background") are not emitted.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

TAGS = ("DT", "JJ", "NN", "NNS", "VB", "VBG", "VBZ", "VBP", "IN", "CC", "OTHER")
NOUN_TAGS = ("NN", "NNS")
VERB_TAGS = ("VB", "VBZ", "VBP", "VBG")

CLOSED_CLASS = {
    **dict.fromkeys("a an the some another this that these those every each".split(), "DT"),
    "is": "VBZ", "are": "VBP", "was": "VB", "were": "VB", "be": "VB", "been": "VB",
    "being": "VBG", "has": "VBZ", "have": "VBP", "had": "VB",
    **dict.fromkeys("in on at of with from by near into onto over under behind through during "
                    "after before for to around across along against toward towards "
                    "while as then when whilst until".split(), "IN"),
    **dict.fromkeys("and or but".split(), "CC"),
    **dict.fromkeys("i you he she it we they him her them his its their someone somebody "
                    "something there".split(), "OTHER"),
}
# words that separate events; every other IN word is a preposition
BARRIERS = frozenset("while as then when whilst until and or but".split())


@dataclass(frozen=True)
class Token:
    text: str
    pos: str


@dataclass(frozen=True)
class PhraseSpan:
    start: int
    end: int
    kind: str  # "NP" or "NP_VP"

    def text(self, words) -> str:
        return " ".join(w.text if isinstance(w, Token) else w for w in words[self.start:self.end])


@lru_cache(maxsize=None)
def load_lexicon() -> dict[str, str]:
    raw = resources.files("tagkit.resources").joinpath("lexicon.tsv").read_text(encoding="utf-8")
    lex = {}
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        word, tag = line.split("\t")
        if tag not in TAGS:
            raise ValueError(f"lexicon.tsv:{lineno}: unknown tag {tag!r}")
        lex[word] = tag
    return lex


def tokenize(caption: str) -> list[str]:
    words = (w.strip(string.punctuation) for w in caption.lower().split())
    return [w for w in words if w]


def _verb_stem_known(word: str, lex) -> bool:
    cands = [word[:-1]]
    if word.endswith("es"):
        cands.append(word[:-2])
    if word.endswith("ies"):
        cands.append(word[:-3] + "y")
    return any(lex.get(c) == "VB" for c in cands)


def tag_word(word: str, lex=None) -> str:
    lex = load_lexicon() if lex is None else lex
    if word in CLOSED_CLASS:
        return CLOSED_CLASS[word]
    if word in lex:
        return lex[word]
    if word.endswith("ing") and len(word) > 4:
        return "VBG"
    if word.endswith("s") and not word.endswith("ss") and len(word) > 2:
        return "VBZ" if _verb_stem_known(word, lex) else "NNS"
    if word.endswith("ed") and len(word) > 3:
        return "VB"
    return "NN"


def pos_tag(tokens) -> list[Token]:
    lex = load_lexicon()
    return [Token(w, tag_word(w, lex)) for w in tokens]


def _match_np(tags, i):
    n = len(tags)
    j = i
    if j < n and tags[j] == "DT":
        j += 1
    while j < n and tags[j] == "JJ":
        j += 1
    k = j
    while k < n and tags[k] in NOUN_TAGS:
        k += 1
    return k if k > j else None


def _match_vp(tags, i):
    k = i
    while k < len(tags) and tags[k] in VERB_TAGS:
        k += 1
    return k if k > i else None


def chunk_phrases(tokens) -> list[PhraseSpan]:
    """Greedy left-to-right, longest-match NP / NP+VP chunking of tagged tokens."""
    tags = [t.pos for t in tokens]
    words = [t.text for t in tokens]
    spans = []
    i = 0
    governed = False
    while i < len(tags):
        np_end = _match_np(tags, i)
        if np_end is None:
            governed = tags[i] == "IN" and words[i] not in BARRIERS
            i += 1
            continue
        vp_end = _match_vp(tags, np_end)
        if vp_end is not None:
            spans.append(PhraseSpan(i, vp_end, "NP_VP"))
            i = vp_end
        else:
            if not governed:
                spans.append(PhraseSpan(i, np_end, "NP"))
            i = np_end
        governed = False
    return spans


def extract_phrases(caption: str) -> list[dict]:
    """Caption -> [{"text", "kind", "start", "end"}] over the tokenized caption."""
    tokens = pos_tag(tokenize(caption))
    return [{"text": s.text(tokens), "kind": s.kind, "start": s.start, "end": s.end}
            for s in chunk_phrases(tokens)]
