"""Synthetic task-oriented corpus plus a simulated frozen ASR front-end.

The front-end plays the role of a trained-then-frozen recognizer: for
each utterance it emits hypothesis words (a noisy copy of the reference),
text embeddings of the hypothesis, audio embeddings of the true words,
and a hypothesis log-probability.  All randomness flows through seeded
numpy generators with one independent stream per (purpose, utterance)
pair, so corpora and embedding tables are byte-identical across runs.

Audio embeddings encode the *true* words (noisily) while text embeddings
encode the possibly-wrong hypothesis; a downstream model can therefore in
principle recover from transcription errors by reading the audio side.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .semtext import (
    IntentNode,
    SemanticParse,
    SlotNode,
    edit_distance,
    linearize_str,
)

# Independent RNG stream tags (never reorder: they are part of the
# reproducibility contract of persisted datasets).
_STREAM_TABLES = 0
_STREAM_CORPUS = 1
_STREAM_CHANNEL = 2
_STREAM_AUDIO = 3
_STREAM_LOGPROB = 4
_STREAM_AUG = 5

_SIDECAR_MAGIC = b"MCSLUEMB"


class InvalidGrammar(ValueError):
    """A template references a slot the grammar does not define."""


class UnknownToken(KeyError):
    """A token outside the configured vocabulary reached an embedding table."""


class Unreachable(RuntimeError):
    """balance_augment could not hit the target within its retry budget."""


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the simulated recognizer and its noising channel."""

    p_sub: float = 0.043
    p_del: float = 0.011
    p_ins: float = 0.011
    embed_dim: int = 32
    frames_per_word: tuple[int, int] = (2, 4)
    sigma_aud: float = 0.1
    alpha: float = 2.0
    beta: float = 0.1
    sigma_lp: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.p_sub < 0 or self.p_del < 0 or self.p_ins < 0:
            raise ValueError("error probabilities must be nonnegative")
        if self.p_sub + self.p_del > 1:
            raise ValueError("p_sub + p_del must not exceed 1")
        if self.sigma_aud < 0 or self.sigma_lp < 0:
            raise ValueError("noise sigmas must be nonnegative")
        if self.frames_per_word[0] < 1 or self.frames_per_word[0] > self.frames_per_word[1]:
            raise ValueError("frames_per_word must be a nonempty positive range")


# Channel presets emulating recognizers of increasing quality; the
# per-word probabilities sum to the target corpus WER (0.065 / 0.046 /
# 0.035), which a first-order expansion makes approximately exact.
NOISE_PRESETS: dict[str, dict[str, float]] = {
    "noisy": {"p_sub": 0.043, "p_del": 0.011, "p_ins": 0.011},
    "medium": {"p_sub": 0.030, "p_del": 0.008, "p_ins": 0.008},
    "clean": {"p_sub": 0.023, "p_del": 0.006, "p_ins": 0.006},
}


def preset_config(name: str, base: SimConfig = SimConfig()) -> SimConfig:
    if name not in NOISE_PRESETS:
        raise KeyError(f"unknown noise preset {name!r}; choose from {sorted(NOISE_PRESETS)}")
    return replace(base, **NOISE_PRESETS[name])


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


# ---------------------------------------------------------------------------
# Grammar


@dataclass(frozen=True)
class SlotSpec:
    """How a slot is filled: k words sampled from ``words`` without
    replacement, k uniform in [min_words, max_words]."""

    label: str
    words: tuple[str, ...]
    min_words: int = 1
    max_words: int = 2

    def fill(self, rng: np.random.Generator) -> list[str]:
        k = int(rng.integers(self.min_words, min(self.max_words, len(self.words)) + 1))
        idx = rng.choice(len(self.words), size=k, replace=False)
        return [self.words[i] for i in idx]

    def all_words(self) -> tuple[str, ...]:
        return self.words


@dataclass(frozen=True)
class Template:
    """A carrier phrase: literal words interleaved with slot references
    written as ``<LABEL>``."""

    pieces: tuple[str, ...]

    def slot_refs(self) -> list[str]:
        return [p[1:-1] for p in self.pieces if p.startswith("<")]


@dataclass(frozen=True)
class DomainGrammar:
    domain: str
    intent: str
    slots: tuple[SlotSpec, ...]
    templates: tuple[Template, ...]


@dataclass(frozen=True)
class Grammar:
    name: str
    domains: tuple[DomainGrammar, ...]

    def __post_init__(self) -> None:
        for dom in self.domains:
            known = {s.label for s in dom.slots}
            for tpl in dom.templates:
                for ref in tpl.slot_refs():
                    if ref not in known:
                        raise InvalidGrammar(
                            f"template in domain {dom.domain!r} references unknown slot {ref!r}"
                        )

    def word_vocabulary(self) -> tuple[str, ...]:
        words: set[str] = set()
        for dom in self.domains:
            for slot in dom.slots:
                words.update(slot.all_words())
            for tpl in dom.templates:
                words.update(p for p in tpl.pieces if not p.startswith("<"))
        return tuple(sorted(words))

    def ontology_symbols(self) -> tuple[str, ...]:
        symbols: set[str] = set()
        for dom in self.domains:
            symbols.add("IN:" + dom.intent)
            symbols.update("SL:" + s.label for s in dom.slots)
        return tuple(sorted(symbols))


def _tpl(text: str) -> Template:
    return Template(tuple(text.split()))


# Slot content is open-vocabulary: every slot draws from one shared pool,
# the way real assistant slots carry arbitrary names, places, and phrases.
# A substituted slot word is therefore just as plausible as the original,
# so slot-content transcription errors cannot be flagged from text alone.
_CONTENT_POOL = (
    "tomorrow", "tonight", "noon", "midnight", "monday", "friday", "sunday",
    "workout", "meeting", "school", "yoga", "soccer", "piano",
    "mom", "dad", "alice", "bob", "carol", "david", "emma", "frank",
    "running", "late", "home", "soon", "dinner", "ready", "call", "back",
    "queen", "coldplay", "beatles", "adele", "drake", "madonna", "eminem",
    "yesterday", "believer", "thunder", "fireworks", "paradise",
    "airport", "downtown", "library", "hospital", "gym", "beach", "mall",
    "campus", "harbor", "station", "hotel", "office", "bridge", "park",
    "five", "ten", "fifteen", "twenty", "minutes", "seconds", "hours",
    "pasta", "laundry", "baking", "nap", "garden", "coffee", "tea",
    "seattle", "boston", "chicago", "denver", "miami", "austin", "portland",
    "today", "saturday", "wednesday", "thursday", "tuesday", "weekend",
    "water", "plants", "rent", "milk", "garage", "dog", "cat",
    "morning", "evening", "afternoon", "winter",
    "jazz", "comedy", "art", "film", "sports", "food",
    "january", "july", "october", "december", "spring", "summer",
)


def default_grammar() -> Grammar:
    """Eight-domain template grammar; 150 distinct carrier/pool words."""
    def slot(label: str, max_words: int = 2) -> SlotSpec:
        return SlotSpec(label, _CONTENT_POOL, max_words=max_words)

    domains = (
        DomainGrammar(
            domain="alarm",
            intent="CREATE_ALARM",
            slots=(slot("DATE_TIME"), slot("ALARM_NAME")),
            templates=(
                _tpl("set an alarm for <DATE_TIME>"),
                _tpl("set a <ALARM_NAME> alarm"),
                _tpl("wake me at <DATE_TIME>"),
            ),
        ),
        DomainGrammar(
            domain="messaging",
            intent="SEND_MESSAGE",
            slots=(slot("RECIPIENT", max_words=1), slot("CONTENT")),
            templates=(
                _tpl("send <RECIPIENT> a message saying <CONTENT>"),
                _tpl("text <RECIPIENT> that <CONTENT>"),
                _tpl("message <RECIPIENT> <CONTENT>"),
            ),
        ),
        DomainGrammar(
            domain="music",
            intent="PLAY_MUSIC",
            slots=(slot("SONG"), slot("ARTIST")),
            templates=(
                _tpl("play <SONG> by <ARTIST>"),
                _tpl("play some <ARTIST>"),
                _tpl("put on <SONG>"),
            ),
        ),
        DomainGrammar(
            domain="navigation",
            intent="GET_DIRECTIONS",
            slots=(slot("DESTINATION"), slot("DEPARTURE")),
            templates=(
                _tpl("directions to <DESTINATION> from <DEPARTURE>"),
                _tpl("navigate to <DESTINATION>"),
                _tpl("take me to <DESTINATION>"),
            ),
        ),
        DomainGrammar(
            domain="timer",
            intent="CREATE_TIMER",
            slots=(slot("DURATION"), slot("TIMER_NAME")),
            templates=(
                _tpl("start a timer for <DURATION>"),
                _tpl("set a <TIMER_NAME> timer"),
                _tpl("count down <DURATION>"),
            ),
        ),
        DomainGrammar(
            domain="weather",
            intent="GET_WEATHER",
            slots=(slot("LOCATION"), slot("FORECAST_DATE")),
            templates=(
                _tpl("whats the weather in <LOCATION>"),
                _tpl("will it rain in <LOCATION> on <FORECAST_DATE>"),
                _tpl("forecast for <LOCATION> <FORECAST_DATE>"),
            ),
        ),
        DomainGrammar(
            domain="reminder",
            intent="CREATE_REMINDER",
            slots=(slot("REMINDER_TODO"), slot("REMINDER_DATE")),
            templates=(
                _tpl("remind me to <REMINDER_TODO> on <REMINDER_DATE>"),
                _tpl("add a reminder to <REMINDER_TODO>"),
                _tpl("dont forget <REMINDER_TODO>"),
            ),
        ),
        DomainGrammar(
            domain="event",
            intent="GET_EVENT",
            slots=(slot("EVENT_TYPE"), slot("EVENT_DATE")),
            templates=(
                _tpl("any <EVENT_TYPE> events in <EVENT_DATE>"),
                _tpl("find <EVENT_TYPE> shows"),
                _tpl("whats happening in <EVENT_DATE>"),
            ),
        ),
    )
    return Grammar(name="default", domains=domains)


# ---------------------------------------------------------------------------
# Corpus


@dataclass(frozen=True)
class Utterance:
    id: str
    ref_words: tuple[str, ...]
    parse: SemanticParse
    domain: str


def _utterance_from_template(
    dom: DomainGrammar, tpl: Template, rng: np.random.Generator, uid: str
) -> Utterance:
    slots = {s.label: s for s in dom.slots}
    children: list = []
    ref_words: list[str] = []
    for piece in tpl.pieces:
        if piece.startswith("<"):
            spec = slots[piece[1:-1]]
            fill = spec.fill(rng)
            children.append(SlotNode("SL:" + spec.label, tuple(fill)))
            ref_words.extend(fill)
        else:
            children.append(piece)
            ref_words.append(piece)
    parse = SemanticParse(IntentNode("IN:" + dom.intent, tuple(children)))
    return Utterance(id=uid, ref_words=tuple(ref_words), parse=parse, domain=dom.domain)


def gen_utterance(grammar: Grammar, seed: int, index: int) -> Utterance:
    rng = _rng(seed, _STREAM_CORPUS, index)
    dom = grammar.domains[rng.integers(len(grammar.domains))]
    tpl = dom.templates[rng.integers(len(dom.templates))]
    return _utterance_from_template(dom, tpl, rng, uid=f"utt-{index:06d}")


def gen_corpus(grammar: Grammar, n: int, seed: int, start_index: int = 0) -> list[Utterance]:
    """Sample ``n`` utterances; deterministic for a fixed seed."""
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    return [gen_utterance(grammar, seed, start_index + i) for i in range(n)]


# ---------------------------------------------------------------------------
# Noising channel


def noise_channel(
    ref: Sequence[str],
    vocab: Sequence[str],
    cfg: SimConfig,
    rng: np.random.Generator | int,
) -> list[str]:
    """Apply i.i.d. substitutions, deletions, and post-word insertions.

    Substituted words are uniform over the vocabulary minus the true
    word; inserted words are uniform over the whole vocabulary.  Never
    returns an empty hypothesis: if every word was deleted, one uniform
    word is kept instead.
    """
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    if isinstance(rng, (int, np.integer)):
        rng = _rng(int(rng), _STREAM_CHANNEL, 0)
    index = {w: i for i, w in enumerate(vocab)}
    out: list[str] = []
    for word in ref:
        u = rng.random()
        if u < cfg.p_sub:
            j = int(rng.integers(len(vocab) - 1))
            if j >= index[word]:
                j += 1
            out.append(vocab[j])
        elif u < cfg.p_sub + cfg.p_del:
            pass
        else:
            out.append(word)
        if rng.random() < cfg.p_ins:
            out.append(vocab[int(rng.integers(len(vocab)))])
    if not out:
        out.append(vocab[int(rng.integers(len(vocab)))])
    return out


# ---------------------------------------------------------------------------
# Frozen front-end


class FrozenAsrFrontend:
    """Fixed, seeded embedding tables standing in for a frozen recognizer.

    Text embeddings are word-vector lookups plus a sinusoidal positional
    component; audio embeddings expand each true word into a few frames
    of a fixed linear projection of its word vector plus Gaussian noise.
    Tables are built once from the config seed and never trained.
    """

    MAX_POSITIONS = 64

    def __init__(self, vocab: Sequence[str], cfg: SimConfig):
        self.vocab = tuple(vocab)
        self.cfg = cfg
        self._index = {w: i for i, w in enumerate(self.vocab)}
        d = cfg.embed_dim
        rng = _rng(cfg.seed, _STREAM_TABLES)
        self.word_vecs = rng.standard_normal((len(self.vocab), d)).astype(np.float32)
        self.audio_proj = (rng.standard_normal((d, d)) / np.sqrt(d)).astype(np.float32)
        pos = np.arange(self.MAX_POSITIONS, dtype=np.float64)[:, None]
        dim = np.arange(d, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
        table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
        self.pos_table = table.astype(np.float32)

    def token_ids(self, words: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._index[w] for w in words], dtype=np.int64)
        except KeyError as err:
            raise UnknownToken(f"token {err.args[0]!r} not in vocabulary") from None

    def embed_text(self, hyp_words: Sequence[str]) -> np.ndarray:
        """Deterministic (U, D) hypothesis embedding: lookup + positions."""
        if len(hyp_words) == 0:
            raise ValueError("hypothesis must be non-empty")
        if len(hyp_words) > self.MAX_POSITIONS:
            raise ValueError(f"hypothesis longer than {self.MAX_POSITIONS} tokens")
        ids = self.token_ids(hyp_words)
        return self.word_vecs[ids] + self.pos_table[: len(ids)]

    def embed_audio(self, ref_words: Sequence[str], rng: np.random.Generator | int) -> np.ndarray:
        """(T, D) audio embedding of the true words, T = sum of per-word frames."""
        if len(ref_words) == 0:
            raise ValueError("reference must be non-empty")
        if isinstance(rng, (int, np.integer)):
            rng = _rng(int(rng), _STREAM_AUDIO, 0)
        lo, hi = self.cfg.frames_per_word
        counts = rng.integers(lo, hi + 1, size=len(ref_words))
        base = self.word_vecs[self.token_ids(ref_words)] @ self.audio_proj
        frames = np.repeat(base, counts, axis=0)
        noise = rng.standard_normal(frames.shape) * self.cfg.sigma_aud
        return (frames + noise).astype(np.float32)

    def hyp_logprob(
        self,
        ref_words: Sequence[str],
        hyp_words: Sequence[str],
        rng: np.random.Generator | int,
    ) -> float:
        """Simulated hypothesis log-probability, more negative with more errors."""
        if len(ref_words) == 0:
            raise ValueError("reference must be non-empty")
        if isinstance(rng, (int, np.integer)):
            rng = _rng(int(rng), _STREAM_LOGPROB, 0)
        ops = edit_distance(ref_words, hyp_words)
        noise = abs(rng.normal(0.0, self.cfg.sigma_lp)) if self.cfg.sigma_lp > 0 else 0.0
        return -(self.cfg.alpha * ops + self.cfg.beta * len(hyp_words) + noise)


# ---------------------------------------------------------------------------
# Records and datasets


@dataclass
class SluRecord:
    """One dataset row: an utterance plus everything the frozen ASR emits."""

    id: str
    domain: str
    ref_words: tuple[str, ...]
    parse_string: str
    hyp_words: tuple[str, ...]
    hyp_logprob: float
    label: int
    e_txt: np.ndarray
    e_aud: np.ndarray


def make_record(utt: Utterance, frontend: FrozenAsrFrontend, cfg: SimConfig, index: int) -> SluRecord:
    hyp = noise_channel(utt.ref_words, frontend.vocab, cfg, _rng(cfg.seed, _STREAM_CHANNEL, index))
    e_txt = frontend.embed_text(hyp)
    e_aud = frontend.embed_audio(utt.ref_words, _rng(cfg.seed, _STREAM_AUDIO, index))
    lp = frontend.hyp_logprob(utt.ref_words, hyp, _rng(cfg.seed, _STREAM_LOGPROB, index))
    return SluRecord(
        id=utt.id,
        domain=utt.domain,
        ref_words=utt.ref_words,
        parse_string=linearize_str(utt.parse),
        hyp_words=tuple(hyp),
        hyp_logprob=lp,
        label=int(tuple(hyp) == utt.ref_words),
        e_txt=e_txt,
        e_aud=e_aud,
    )


@dataclass
class SluDataset:
    """Train/valid/test record splits plus the config that produced them."""

    cfg: SimConfig
    grammar_name: str
    vocab: tuple[str, ...]
    splits: dict[str, list[SluRecord]] = field(default_factory=dict)

    def error_fraction(self, split: str) -> float:
        records = self.splits[split]
        return sum(1 for r in records if r.label == 0) / len(records)


DEFAULT_SPLIT_SIZES = {"train": 8000, "valid": 1000, "test": 2000}


def gen_dataset(
    grammar: Grammar,
    cfg: SimConfig,
    split_sizes: Optional[dict[str, int]] = None,
) -> SluDataset:
    """Generate a fully materialized dataset; deterministic per config."""
    sizes = dict(DEFAULT_SPLIT_SIZES if split_sizes is None else split_sizes)
    frontend = FrozenAsrFrontend(grammar.word_vocabulary(), cfg)
    dataset = SluDataset(cfg=cfg, grammar_name=grammar.name, vocab=frontend.vocab)
    offset = 0
    for split in ("train", "valid", "test"):
        n = sizes[split]
        utts = gen_corpus(grammar, n, cfg.seed, start_index=offset)
        dataset.splits[split] = [
            make_record(utt, frontend, cfg, offset + i) for i, utt in enumerate(utts)
        ]
        offset += n
    return dataset


class UnbalancedDatasetWarning(UserWarning):
    """Training targets are heavily skewed towards the correct class."""


def check_balance(records: Sequence[SluRecord], floor: float = 0.10) -> float:
    frac = sum(1 for r in records if r.label == 0) / len(records)
    if frac < floor:
        warnings.warn(
            f"label-0 fraction {frac:.3f} below {floor:.0%}; consider balance_augment",
            UnbalancedDatasetWarning,
            stacklevel=2,
        )
    return frac


def balance_augment(
    records: Sequence[SluRecord],
    target_error_fraction: float,
    frontend: FrozenAsrFrontend,
    cfg: SimConfig,
    seed: int,
    boost: float = 8.0,
    max_attempts_per_record: int = 50,
) -> list[SluRecord]:
    """Top a dataset up with re-noised copies until the label-0 fraction
    lands within two points of the target.

    Error records are produced by re-running the noising channel with
    boosted probabilities on resampled utterances; correct records (when
    the input is already too error-heavy) are clean re-emissions.  All
    original records are retained.
    """
    if not 0 < target_error_fraction < 1:
        raise ValueError("target_error_fraction must be in (0, 1)")
    n = len(records)
    if n == 0:
        raise ValueError("cannot balance an empty dataset")
    n0 = sum(1 for r in records if r.label == 0)
    if abs(n0 / n - target_error_fraction) <= 0.02:
        return list(records)

    out = list(records)
    rng = _rng(seed, _STREAM_AUG, 0)
    want_errors = n0 / n < target_error_fraction
    if want_errors:
        need = int(np.ceil((target_error_fraction * n - n0) / (1 - target_error_fraction)))
        noisy_cfg = replace(
            cfg,
            p_sub=min(0.5, cfg.p_sub * boost),
            p_del=min(0.2, cfg.p_del * boost),
            p_ins=min(0.2, cfg.p_ins * boost),
        )
    else:
        need = int(np.ceil(n0 / target_error_fraction - n))
        noisy_cfg = replace(cfg, p_sub=0.0, p_del=0.0, p_ins=0.0)

    made = 0
    attempts = 0
    budget = max_attempts_per_record * need
    while made < need:
        if attempts >= budget:
            raise Unreachable(
                f"could not reach error fraction {target_error_fraction} "
                f"after {attempts} resampling attempts"
            )
        attempts += 1
        src = records[int(rng.integers(n))]
        hyp = noise_channel(src.ref_words, frontend.vocab, noisy_cfg, rng)
        label = int(tuple(hyp) == src.ref_words)
        if want_errors and label == 1:
            continue
        e_aud = frontend.embed_audio(src.ref_words, rng)
        lp = frontend.hyp_logprob(src.ref_words, hyp, rng)
        out.append(
            SluRecord(
                id=f"aug-{made:06d}",
                domain=src.domain,
                ref_words=src.ref_words,
                parse_string=src.parse_string,
                hyp_words=tuple(hyp),
                hyp_logprob=lp,
                label=label,
                e_txt=frontend.embed_text(hyp),
                e_aud=e_aud,
            )
        )
        made += 1
    return out


# ---------------------------------------------------------------------------
# Persistence: JSON Lines records, embeddings inline or in a sidecar blob


def _record_payload(rec: SluRecord, embeddings: str, sidecar_name: str | None) -> dict:
    payload: dict = {
        "id": rec.id,
        "domain": rec.domain,
        "ref_words": list(rec.ref_words),
        "parse_string": rec.parse_string,
        "hyp_words": list(rec.hyp_words),
        "hyp_logprob": rec.hyp_logprob,
        "label": rec.label,
    }
    if embeddings == "inline":
        payload["e_txt"] = [[float(x) for x in row] for row in rec.e_txt]
        payload["e_aud"] = [[float(x) for x in row] for row in rec.e_aud]
    elif embeddings == "sidecar":
        payload["e_txt_path"] = sidecar_name
        payload["e_aud_path"] = sidecar_name
    return payload


def _write_sidecar(path: Path, records: Sequence[SluRecord], embed_dim: int) -> None:
    index: dict[str, list[int]] = {}
    offset = 0
    blobs: list[bytes] = []
    for rec in records:
        e_txt = np.ascontiguousarray(rec.e_txt, dtype="<f4")
        e_aud = np.ascontiguousarray(rec.e_aud, dtype="<f4")
        index[rec.id] = [offset, e_txt.shape[0], e_aud.shape[0], embed_dim]
        blobs.append(e_txt.tobytes())
        blobs.append(e_aud.tobytes())
        offset += len(blobs[-2]) + len(blobs[-1])
    header = json.dumps({"dtype": "<f4", "index": index}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_SIDECAR_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read_sidecar(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_SIDECAR_MAGIC))
        if magic != _SIDECAR_MAGIC:
            raise ValueError(f"{path} is not an embedding sidecar")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for rec_id, (offset, u, t, d) in header["index"].items():
        txt_bytes = u * d * 4
        e_txt = np.frombuffer(data, dtype="<f4", count=u * d, offset=offset).reshape(u, d)
        e_aud = np.frombuffer(data, dtype="<f4", count=t * d, offset=offset + txt_bytes).reshape(t, d)
        out[rec_id] = (e_txt.copy(), e_aud.copy())
    return out


def save_dataset(dataset: SluDataset, out_dir: str | Path, embeddings: str = "sidecar") -> None:
    """Persist splits as JSON Lines plus embeddings per the chosen mode.

    ``sidecar`` writes one little-endian float32 blob per split with an
    index header; ``inline`` embeds matrices in each record; ``none``
    stores only words (embeddings are regenerated exactly on load, which
    requires generator-produced ``utt-`` record ids).
    """
    if embeddings not in ("sidecar", "inline", "none"):
        raise ValueError("embeddings must be 'sidecar', 'inline', or 'none'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if embeddings == "none":
        for split, records in dataset.splits.items():
            bad = [r.id for r in records if not r.id.startswith("utt-")]
            if bad:
                raise ValueError(
                    f"embeddings='none' requires regenerable records; {split} has {bad[:3]}"
                )
    meta = {
        "format": "mcslu-dataset",
        "version": 1,
        "embeddings": embeddings,
        "grammar": dataset.grammar_name,
        "vocab": list(dataset.vocab),
        "sim": {
            "p_sub": dataset.cfg.p_sub,
            "p_del": dataset.cfg.p_del,
            "p_ins": dataset.cfg.p_ins,
            "embed_dim": dataset.cfg.embed_dim,
            "frames_per_word": list(dataset.cfg.frames_per_word),
            "sigma_aud": dataset.cfg.sigma_aud,
            "alpha": dataset.cfg.alpha,
            "beta": dataset.cfg.beta,
            "sigma_lp": dataset.cfg.sigma_lp,
            "seed": dataset.cfg.seed,
        },
        "splits": {name: len(records) for name, records in dataset.splits.items()},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for split, records in dataset.splits.items():
        sidecar_name = f"{split}.emb" if embeddings == "sidecar" else None
        with open(out / f"{split}.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(_record_payload(rec, embeddings, sidecar_name)) + "\n")
        if embeddings == "sidecar":
            _write_sidecar(out / f"{split}.emb", records, dataset.cfg.embed_dim)


def load_dataset(in_dir: str | Path) -> SluDataset:
    """Load a persisted dataset, restoring embeddings bit-exactly."""
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    sim = dict(meta["sim"])
    sim["frames_per_word"] = tuple(sim["frames_per_word"])
    cfg = SimConfig(**sim)
    vocab = tuple(meta["vocab"])
    mode = meta["embeddings"]
    frontend = FrozenAsrFrontend(vocab, cfg) if mode == "none" else None
    dataset = SluDataset(cfg=cfg, grammar_name=meta["grammar"], vocab=vocab)
    for split in meta["splits"]:
        sidecar = _read_sidecar(src / f"{split}.emb") if mode == "sidecar" else {}
        records: list[SluRecord] = []
        with open(src / f"{split}.jsonl") as fh:
            for line in fh:
                row = json.loads(line)
                if mode == "inline":
                    e_txt = np.array(row["e_txt"], dtype=np.float32)
                    e_aud = np.array(row["e_aud"], dtype=np.float32)
                elif mode == "sidecar":
                    e_txt, e_aud = sidecar[row["id"]]
                else:
                    assert frontend is not None
                    index = int(row["id"].split("-")[1])
                    e_txt = frontend.embed_text(row["hyp_words"])
                    e_aud = frontend.embed_audio(row["ref_words"], _rng(cfg.seed, _STREAM_AUDIO, index))
                records.append(
                    SluRecord(
                        id=row["id"],
                        domain=row["domain"],
                        ref_words=tuple(row["ref_words"]),
                        parse_string=row["parse_string"],
                        hyp_words=tuple(row["hyp_words"]),
                        hyp_logprob=row["hyp_logprob"],
                        label=row["label"],
                        e_txt=e_txt,
                        e_aud=e_aud,
                    )
                )
        dataset.splits[split] = records
    return dataset


def corpus_wer(records: Iterable[SluRecord]) -> float:
    """Aggregate WER: total edit operations over total reference words."""
    ops = 0
    ref_len = 0
    for rec in records:
        ops += edit_distance(rec.ref_words, rec.hyp_words)
        ref_len += len(rec.ref_words)
    return ops / ref_len
