"""Prompt template loading and placeholder substitution."""
from __future__ import annotations

import re
from pathlib import Path

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")

TEMPLATE_FILES = ("rationale.txt", "strategy.txt", "draft.txt", "judge.txt", "reflect.txt")


class TemplateError(Exception):
    """A template file is missing or references a placeholder with no value."""


class PromptLibrary:
    """The five pipeline templates, loaded from a directory.

    Placeholders use ``{name}`` syntax. Rendering a template that references
    a placeholder the caller did not supply is a hard configuration error,
    never a silent blank. Braces that do not form a ``{lower_snake}`` token
    pass through untouched, so templates may contain literal braces.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._templates: dict[str, str] = {}
        for filename in TEMPLATE_FILES:
            path = self.directory / filename
            if not path.is_file():
                raise TemplateError(f"missing template file: {path}")
            self._templates[filename.removesuffix(".txt")] = path.read_text(encoding="utf-8")

    def names(self) -> tuple[str, ...]:
        return tuple(self._templates)

    def render(self, name: str, **values: object) -> str:
        try:
            template = self._templates[name]
        except KeyError:
            raise TemplateError(f"unknown template: {name!r}") from None

        def substitute(match: re.Match[str]) -> str:
            key = match.group(1)
            if key not in values:
                raise TemplateError(
                    f"template {name!r} uses placeholder {{{key}}} but no value was provided"
                )
            return str(values[key])

        return _PLACEHOLDER_RE.sub(substitute, template)


def default_templates_dir() -> Path:
    """Directory of the templates shipped with the package."""
    return Path(__file__).parent / "prompts"
