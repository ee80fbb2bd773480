"""Parsers for struct definition files.

Two input shapes are accepted:

* a minimal C subset::

      struct A {
        char c;
        int i;
        char buf[64];
        void (*fp)();
        double d;
      };

  with ``//`` and ``/* */`` comments, LP64 scalar types, arrays of scalars,
  data pointers (``T *p;``), function pointers (``T (*f)(...);``), and
  references to previously defined structs (``struct B inner;``), which are
  flattened field by field.  Bit-fields are rejected: a byte-granular mask
  cannot guard sub-byte fields.

* a JSON document (used when the file name ends in ``.json``)::

      {"structs": [{"name": "A", "fields": [
          {"name": "c", "type": "char"},
          {"name": "buf", "type": "char", "count": 64},
          {"name": "p", "type": "pointer"},
          {"name": "fp", "type": "function_pointer"},
          {"name": "x", "type": "scalar", "size": 2, "alignment": 2}]}]}

Nested-struct flattening repacks members with the parent's alignment walk;
it does not preserve a nested struct's own tail padding.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

from .layout import FieldDef, FieldKind, LayoutError, LP64_TYPES

_COMMENT_RE = re.compile(r"//[^\n]*|/\*.*?\*/", re.DOTALL)
_STRUCT_RE = re.compile(r"struct\s+(\w+)\s*\{([^{}]*)\}\s*;")
_FNPTR_RE = re.compile(r"^[\w \t*]+\(\s*\*\s*(\w+)\s*\)\s*\([^)]*\)$")
_POINTER_RE = re.compile(r"^([\w \t]+?)\s*\*+\s*(\w+)$")
_ARRAY_RE = re.compile(r"^([\w \t]+?)\s+(\w+)\s*\[\s*(\d+)\s*\]$")
_SCALAR_RE = re.compile(r"^([\w \t]+?)\s+(\w+)$")


class StructParseError(ValueError):
    """A struct definition that cannot be understood."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def parse_struct_text(text: str) -> dict[str, tuple[FieldDef, ...]]:
    """Parse C-subset struct definitions into ordered field lists."""
    stripped = _COMMENT_RE.sub(" ", text)
    structs: dict[str, tuple[FieldDef, ...]] = {}
    for match in _STRUCT_RE.finditer(stripped):
        name, body = match.group(1), match.group(2)
        if name in structs:
            raise StructParseError(f"struct {name!r} defined twice",
                                   _line_of(stripped, match.start()))
        fields: list[FieldDef] = []
        for decl in body.split(";"):
            decl = decl.strip()
            if not decl:
                continue
            line_no = _line_of(stripped, stripped.find(decl, match.start()))
            fields.extend(_parse_decl(decl, structs, line_no))
        if not fields:
            raise StructParseError(f"struct {name!r} has no fields",
                                   _line_of(stripped, match.start()))
        structs[name] = tuple(fields)
    leftover = _STRUCT_RE.sub(" ", stripped).strip()
    if not structs:
        raise StructParseError("no struct definitions found")
    if leftover:
        snippet = leftover.split("\n", 1)[0][:60]
        raise StructParseError(f"unrecognized input near {snippet!r}")
    return structs


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, max(pos, 0)) + 1


def _parse_decl(decl: str, known: dict[str, tuple[FieldDef, ...]],
                line_no: int) -> list[FieldDef]:
    if ":" in decl:
        raise StructParseError(
            f"bit-field in {decl!r}: byte-granular security masks cannot "
            "protect sub-byte fields", line_no)
    m = _FNPTR_RE.match(decl)
    if m:
        return [FieldDef.function_pointer(m.group(1))]
    m = _POINTER_RE.match(decl)
    if m:
        return [FieldDef.pointer(m.group(2))]
    m = _ARRAY_RE.match(decl)
    if m:
        elem, name, count = m.group(1).strip(), m.group(2), int(m.group(3))
        return [FieldDef.array(name, _normalize_type(elem, line_no), count)]
    m = _SCALAR_RE.match(decl)
    if m:
        type_name, name = m.group(1).strip(), m.group(2)
        if type_name.startswith("struct "):
            inner = type_name.split(None, 1)[1]
            if inner not in known:
                raise StructParseError(f"unknown struct {inner!r}", line_no)
            return [
                FieldDef(f"{name}.{f.name}", f.kind, f.size, f.alignment,
                         f.element_type, f.count)
                for f in known[inner]
            ]
        return [FieldDef.scalar(name, _normalize_type(type_name, line_no))]
    raise StructParseError(f"cannot parse field declaration {decl!r}", line_no)


def _normalize_type(type_name: str, line_no: int) -> str:
    key = " ".join(type_name.split())
    if key not in LP64_TYPES:
        raise StructParseError(f"unknown type {key!r}", line_no)
    return key


def parse_struct_json(text: str) -> dict[str, tuple[FieldDef, ...]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise StructParseError(f"invalid JSON: {e}", e.lineno) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("structs"), list):
        raise StructParseError('expected an object with a "structs" array')
    structs: dict[str, tuple[FieldDef, ...]] = {}
    for entry in doc["structs"]:
        name = entry.get("name")
        raw_fields = entry.get("fields")
        if not name or not raw_fields:
            raise StructParseError("each struct needs a name and a fields array")
        fields = [_field_from_json(name, raw, structs) for raw in raw_fields]
        flat: list[FieldDef] = []
        for item in fields:
            flat.extend(item if isinstance(item, list) else [item])
        structs[name] = tuple(flat)
    return structs


def _field_from_json(struct_name: str, raw: dict,
                     known: dict[str, tuple[FieldDef, ...]]):
    try:
        name = raw["name"]
        type_name = raw["type"]
    except (TypeError, KeyError):
        raise StructParseError(
            f"struct {struct_name!r}: each field needs name and type") from None
    if type_name == "pointer":
        return FieldDef.pointer(name)
    if type_name == "function_pointer":
        return FieldDef.function_pointer(name)
    if type_name == "scalar":
        size = raw.get("size")
        align = raw.get("alignment", size)
        if not size:
            raise StructParseError(f"field {name!r}: explicit scalar needs a size")
        return FieldDef(name, FieldKind.SCALAR, size, align)
    if type_name == "struct":
        inner = raw.get("struct")
        if inner not in known:
            raise StructParseError(f"field {name!r}: unknown struct {inner!r}")
        return [
            FieldDef(f"{name}.{f.name}", f.kind, f.size, f.alignment,
                     f.element_type, f.count)
            for f in known[inner]
        ]
    count = raw.get("count")
    try:
        if count is not None:
            return FieldDef.array(name, type_name, int(count))
        return FieldDef.scalar(name, type_name)
    except LayoutError as e:
        raise StructParseError(f"field {name!r}: {e}") from None


def load_struct_file(path: str | Path) -> dict[str, tuple[FieldDef, ...]]:
    """Load struct definitions from a ``.json`` or C-subset text file."""
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".json":
        return parse_struct_json(text)
    return parse_struct_text(text)
