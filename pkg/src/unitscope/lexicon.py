"""Reporting lexicon: ordered categories grouped into the standard finding
families (mass, calcification, architectural distortion, asymmetry,
associated features, breast composition). Ships as an editable data file."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources as importlib_resources

from .errors import ValidationError

CANCER_ASSOCIATIONS = ("benign", "malignant", "unclear", "none")
NO_CATEGORY = "none"


@dataclass(frozen=True)
class LexiconCategory:
    id: str
    display_name: str
    group: str


@dataclass
class Lexicon:
    groups: list[dict]  # ordered [{id, display_name}]
    categories: list[LexiconCategory]

    def __post_init__(self):
        group_ids = [g["id"] for g in self.groups]
        if len(set(group_ids)) != len(group_ids):
            raise ValidationError("lexicon group ids must be unique")
        cat_ids = [c.id for c in self.categories]
        if len(set(cat_ids)) != len(cat_ids):
            raise ValidationError("lexicon category ids must be unique")
        if NO_CATEGORY in cat_ids:
            raise ValidationError(f"category id {NO_CATEGORY!r} is reserved")
        known = set(group_ids)
        for cat in self.categories:
            if cat.group not in known:
                raise ValidationError(f"category {cat.id!r} references unknown group {cat.group!r}")

    def has_category(self, category_id: str) -> bool:
        return any(c.id == category_id for c in self.categories)

    def group_of(self, category_id: str) -> str | None:
        for c in self.categories:
            if c.id == category_id:
                return c.group
        return None

    def to_json(self) -> dict:
        return {
            "groups": list(self.groups),
            "categories": [
                {"id": c.id, "display_name": c.display_name, "group": c.group}
                for c in self.categories
            ],
        }


def _lexicon_from_doc(doc: dict, source: str) -> Lexicon:
    if not isinstance(doc, dict) or "categories" not in doc:
        raise ValidationError(f"{source}: lexicon must be an object with 'categories'")
    categories = []
    for raw in doc["categories"]:
        try:
            categories.append(
                LexiconCategory(
                    id=str(raw["id"]),
                    display_name=str(raw.get("display_name", raw["id"])),
                    group=str(raw["group"]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{source}: bad category record {raw!r}: {exc}") from exc
    groups = doc.get("groups")
    if groups is None:
        seen = []
        for c in categories:
            if c.group not in seen:
                seen.append(c.group)
        groups = [{"id": g, "display_name": g} for g in seen]
    else:
        groups = [{"id": str(g["id"]), "display_name": str(g.get("display_name", g["id"]))}
                  for g in groups]
    return Lexicon(groups=groups, categories=categories)


def load_lexicon(path) -> Lexicon:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"lexicon file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: lexicon is not valid JSON: {exc}") from exc
    return _lexicon_from_doc(doc, str(path))


def default_lexicon_path() -> str:
    return str(importlib_resources.files("unitscope").joinpath("resources/default_lexicon.json"))


def default_lexicon() -> Lexicon:
    return load_lexicon(default_lexicon_path())
