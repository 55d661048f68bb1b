"""Versioned Jinja2 prompt templates.

Each template file has an ``# instruction`` section (sent as the system
prompt) and an ``# input`` section (sent as the user message). Sections are
split before rendering so article text can never move the boundary.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import jinja2

PROMPT_VERSION = "1"

_ENV = jinja2.Environment(
    undefined=jinja2.StrictUndefined,
    trim_blocks=True,
    lstrip_blocks=False,
    keep_trailing_newline=False,
    autoescape=False,
)


@lru_cache(maxsize=None)
def _sections(name: str) -> tuple[jinja2.Template, jinja2.Template]:
    source = resources.files("aee.prompt_templates").joinpath(f"{name}.j2").read_text("utf-8")
    lines = source.splitlines()
    try:
        i = lines.index("# instruction")
        j = lines.index("# input", i + 1)
    except ValueError:
        raise ValueError(f"prompt {name!r} lacks '# instruction' / '# input' sections") from None
    system = "\n".join(lines[i + 1 : j]).strip("\n")
    user = "\n".join(lines[j + 1 :]).strip("\n")
    return _ENV.from_string(system), _ENV.from_string(user)


def render_prompt(name: str, **variables: object) -> tuple[str, str]:
    """Render template ``name`` into a ``(system, user)`` pair."""
    system, user = _sections(name)
    return system.render(**variables).strip(), user.render(**variables).strip()
