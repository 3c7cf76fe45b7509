"""Robust JSON extraction from LLM completions.

Models wrap payloads in prose and emit raw backslashes (Windows registry and
file paths), so extraction strips text outside the outermost bracket pair and
escapes lone backslashes before parsing. Valid JSON passes through unchanged.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

# Valid escape sequences are consumed whole so only lone backslashes match the
# final single-character alternative.
_ESCAPE_RX = re.compile(r'\\u[0-9a-fA-F]{4}|\\["\\/bfnrt]|\\')


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    detail: str = ""


def repair_backslashes(text: str) -> str:
    """Escape backslashes that do not start a valid JSON escape sequence."""
    return _ESCAPE_RX.sub(lambda m: "\\\\" if len(m.group(0)) == 1 else m.group(0), text)


def _clip(text: str, open_char: str, close_char: str) -> str | None:
    start = text.find(open_char)
    end = text.rfind(close_char)
    if start == -1 or end == -1 or end <= start:
        return None
    return text[start : end + 1]


def extract_json(completion: str, kind: str = "object") -> object | ParseFailure:
    """Parse the outermost JSON value of the requested kind from a completion.

    ``kind`` is "object" for ``{...}`` payloads or "array" for ``[...]``.
    Leading/trailing prose is stripped; lone backslashes are repaired before a
    second parse attempt so already-valid payloads are never mutated.
    """
    open_char, close_char = ("[", "]") if kind == "array" else ("{", "}")
    clipped = _clip(completion, open_char, close_char)
    if clipped is None:
        return ParseFailure("no JSON payload", completion[:200])
    try:
        return json.loads(clipped)
    except json.JSONDecodeError:
        pass
    try:
        return json.loads(repair_backslashes(clipped))
    except json.JSONDecodeError as exc:
        return ParseFailure("invalid JSON after repair", f"{exc.msg} at pos {exc.pos}")
