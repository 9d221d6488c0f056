"""Document loading, whitespace cleaning and chunking.

All offsets are counted in Unicode code points of the *cleaned* text.
"""

from __future__ import annotations

import os
import re
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    ExtractorFailed,
    ExtractorUnavailable,
    InvalidChunking,
    InvalidEncoding,
    MissingFile,
    PreconditionError,
    UnknownStrategy,
)

STRATEGIES = ("character", "sentence")
EXTRACTOR_ENV = "RAGKIT_EXTRACTOR_COMMAND"


@dataclass(frozen=True)
class RawDocument:
    path: str
    text: str
    byte_size: int

    def __post_init__(self):
        if not self.path:
            raise PreconditionError("document path must be non-empty")
        if "\x00" in self.text:
            raise PreconditionError("document text contains NUL characters")


@dataclass(frozen=True)
class ChunkSpan:
    index: int
    start: int
    end: int
    text: str


def _decode(data: bytes, source: str, lossy: bool) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        if lossy:
            return data.decode("utf-8", errors="replace")
        raise InvalidEncoding(f"{source} is not valid UTF-8 ({exc.reason} at byte {exc.start})") from exc


def load_document(path: str | os.PathLike, extractor_command: str | None = None,
                  lossy: bool = False) -> RawDocument:
    """Read a text or PDF file into a RawDocument.

    PDFs go through ``extractor_command`` (falling back to the
    ``RAGKIT_EXTRACTOR_COMMAND`` environment variable), which is invoked as
    ``<command> <path>`` and must print UTF-8 text on stdout. Any other
    extension is read as UTF-8 text. NUL characters are dropped.
    """
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"no such file: {p}")

    if p.suffix.lower() == ".pdf":
        command = extractor_command or os.environ.get(EXTRACTOR_ENV)
        if not command:
            raise ExtractorUnavailable(f"{p} is a PDF but no extractor command is configured")
        argv = shlex.split(command) + [str(p)]
        try:
            proc = subprocess.run(argv, capture_output=True, check=False)
        except OSError as exc:
            raise ExtractorFailed(f"could not run extractor {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            stderr = proc.stderr.decode("utf-8", errors="replace").strip()
            raise ExtractorFailed(f"extractor exited {proc.returncode} on {p}: {stderr}")
        text = _decode(proc.stdout, f"extractor output for {p}", lossy)
    else:
        text = _decode(p.read_bytes(), str(p), lossy)

    return RawDocument(path=str(p), text=text.replace("\x00", ""), byte_size=p.stat().st_size)


_SPACE_RUN = re.compile(r"[ \t]+")
_SPACE_AROUND_LF = re.compile(r"[ \t]*\n[ \t]*")
_LF_RUN = re.compile(r"\n{3,}")


def clean_text(raw: str) -> str:
    """Normalize line endings and whitespace.

    CR/CRLF become LF, space/tab runs become one space, spaces and tabs next
    to a line break are dropped, 3+ line breaks collapse to a blank line and
    the result is trimmed.
    """
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    text = _SPACE_RUN.sub(" ", text)
    # must run before LF collapsing, otherwise "\n \n \n" survives one pass
    text = _SPACE_AROUND_LF.sub("\n", text)
    text = _LF_RUN.sub("\n\n", text)
    return text.strip()


def _validate_chunking(chunk_size: int, chunk_overlap: int) -> None:
    if isinstance(chunk_size, bool) or not isinstance(chunk_size, int) or chunk_size <= 0:
        raise InvalidChunking(f"chunk_size must be a positive integer, got {chunk_size!r}")
    if isinstance(chunk_overlap, bool) or not isinstance(chunk_overlap, int) or chunk_overlap < 0:
        raise InvalidChunking(f"chunk_overlap must be a non-negative integer, got {chunk_overlap!r}")
    if chunk_overlap >= chunk_size:
        raise InvalidChunking(f"chunk_overlap ({chunk_overlap}) must be smaller than chunk_size ({chunk_size})")


def chunk_characters(text: str, chunk_size: int, chunk_overlap: int) -> list[ChunkSpan]:
    _validate_chunking(chunk_size, chunk_overlap)
    step = chunk_size - chunk_overlap
    spans: list[ChunkSpan] = []
    start = 0
    while start < len(text):
        end = min(start + chunk_size, len(text))
        spans.append(ChunkSpan(len(spans), start, end, text[start:end]))
        if end == len(text):
            break
        start += step
    return spans


# a maximal run of terminal punctuation followed by whitespace or end of text
_SENTENCE_END = re.compile(r"[.?!]+(?=\s|\Z)")


def _sentence_bounds(text: str) -> list[tuple[int, int]]:
    bounds = []
    pos = 0
    cuts = [m.end() for m in _SENTENCE_END.finditer(text)]
    if not cuts or cuts[-1] != len(text):
        cuts.append(len(text))
    for cut in cuts:
        start, end = pos, cut
        while start < end and text[start].isspace():
            start += 1
        while end > start and text[end - 1].isspace():
            end -= 1
        if start < end:
            bounds.append((start, end))
        pos = cut
    return bounds


def split_sentences(text: str) -> list[str]:
    return [text[s:e] for s, e in _sentence_bounds(text)]


def chunk_document(doc: RawDocument, strategy: str = "character", chunk_size: int = 3200,
                   chunk_overlap: int = 960) -> list[ChunkSpan]:
    """Clean ``doc.text`` and cut it into spans.

    ``"sentence"`` ignores size and overlap and emits one span per sentence.
    Span offsets refer to ``clean_text(doc.text)``.
    """
    if strategy not in STRATEGIES:
        raise UnknownStrategy(f"unknown chunking strategy {strategy!r}; expected one of {STRATEGIES}")
    text = clean_text(doc.text)
    if strategy == "character":
        return chunk_characters(text, chunk_size, chunk_overlap)
    return [ChunkSpan(i, s, e, text[s:e]) for i, (s, e) in enumerate(_sentence_bounds(text))]


_WORD = re.compile(r"\w+")


def content_tokens(text: str, min_length: int = 4) -> set[str]:
    """Lowercased word tokens of at least ``min_length`` characters."""
    return {w for w in _WORD.findall(text.lower()) if len(w) >= min_length}
