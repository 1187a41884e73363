"""Readers and writers for OFF, OBJ and ASCII PLY triangle meshes.

Only triangles are accepted; a polygon with more than three corners is
rejected with the offending line number instead of being triangulated.
Coordinates are written with 17 significant digits so that a save/load round
trip reproduces them exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import TriMesh

FORMATS = ("off", "obj", "ply")


class MeshParseError(ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def _format_of(path, fmt):
    if fmt is None:
        fmt = Path(path).suffix.lstrip(".")
    fmt = fmt.lower()
    if fmt not in FORMATS:
        raise ValueError(f"unsupported mesh format {fmt!r}; expected one of {FORMATS}")
    return fmt


def _content_lines(path):
    """Yield (line_number, tokens) for non-blank, non-comment lines."""
    with open(path, "r", encoding="ascii") as fh:
        for i, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield i, line.split()


def _floats(path, lineno, tokens, n=3):
    if len(tokens) < n:
        raise MeshParseError(path, lineno, f"expected {n} coordinates, got {len(tokens)}")
    try:
        return [float(t) for t in tokens[:n]]
    except ValueError as exc:
        raise MeshParseError(path, lineno, str(exc)) from None


def _ints(path, lineno, tokens):
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise MeshParseError(path, lineno, str(exc)) from None


def _triangle(path, lineno, idx):
    if len(idx) != 3:
        raise MeshParseError(path, lineno, f"non-triangular face with {len(idx)} vertices")
    return idx


def read_off(path):
    lines = _content_lines(path)
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise MeshParseError(path, 0, "empty file") from None
    if tokens[0] != "OFF":
        raise MeshParseError(path, lineno, "missing OFF header")
    tokens = tokens[1:]
    if not tokens:
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise MeshParseError(path, lineno, "missing element counts") from None
    counts = _ints(path, lineno, tokens)
    if len(counts) < 2:
        raise MeshParseError(path, lineno, "expected vertex and face counts")
    n_verts, n_faces = counts[0], counts[1]
    verts, faces = [], []
    for lineno, tokens in lines:
        if len(verts) < n_verts:
            verts.append(_floats(path, lineno, tokens))
        elif len(faces) < n_faces:
            vals = _ints(path, lineno, tokens)
            if not vals or len(vals) < vals[0] + 1:
                raise MeshParseError(path, lineno, "truncated face record")
            faces.append(_triangle(path, lineno, vals[1 : vals[0] + 1]))
        else:
            raise MeshParseError(path, lineno, "unexpected trailing data")
    if len(verts) != n_verts or len(faces) != n_faces:
        raise MeshParseError(
            path, lineno, f"expected {n_verts} vertices and {n_faces} faces, "
            f"found {len(verts)} and {len(faces)}"
        )
    return verts, faces


def read_obj(path):
    verts, faces = [], []
    for lineno, tokens in _content_lines(path):
        tag = tokens[0]
        if tag == "v":
            verts.append(_floats(path, lineno, tokens[1:]))
        elif tag == "f":
            idx = []
            for t in tokens[1:]:
                head = t.split("/", 1)[0]
                try:
                    k = int(head)
                except ValueError:
                    raise MeshParseError(path, lineno, f"bad face index {t!r}") from None
                # negative indices count back from the current vertex
                idx.append(k - 1 if k > 0 else len(verts) + k)
            faces.append(_triangle(path, lineno, idx))
    return verts, faces


def read_ply(path):
    lines = _content_lines(path)
    lineno, tokens = next(lines, (0, [""]))
    if tokens != ["ply"]:
        raise MeshParseError(path, lineno, "missing ply magic")
    elements = []
    for lineno, tokens in lines:
        key = tokens[0]
        if key == "format":
            if tokens[1:2] != ["ascii"]:
                raise MeshParseError(path, lineno, "only ASCII PLY is supported")
        elif key == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif key == "property":
            if not elements:
                raise MeshParseError(path, lineno, "property outside element")
            elements[-1][2].append(tokens[1:])
        elif key in ("comment", "obj_info"):
            continue
        elif key == "end_header":
            break
        else:
            raise MeshParseError(path, lineno, f"unknown header keyword {key!r}")
    verts, faces = [], []
    for name, count, props in elements:
        for _ in range(count):
            try:
                lineno, tokens = next(lines)
            except StopIteration:
                raise MeshParseError(path, lineno, f"truncated {name} element") from None
            if name == "vertex":
                names = [p[-1] for p in props]
                try:
                    row = dict(zip(names, (float(t) for t in tokens)))
                    verts.append([row["x"], row["y"], row["z"]])
                except (KeyError, ValueError) as exc:
                    raise MeshParseError(path, lineno, f"bad vertex record: {exc}") from None
            elif name == "face":
                vals = _ints(path, lineno, tokens)
                if not vals or len(vals) < vals[0] + 1:
                    raise MeshParseError(path, lineno, "truncated face record")
                faces.append(_triangle(path, lineno, vals[1 : vals[0] + 1]))
    return verts, faces


_READERS = {"off": read_off, "obj": read_obj, "ply": read_ply}


def load_mesh(path, format=None):
    """Load a triangle mesh, preserving vertex and face order from the file.

    Parameters
    ----------
    path : str or Path
    format : {"off", "obj", "ply"}, optional
        Inferred from the file suffix when omitted.

    Raises
    ------
    MeshParseError
        With the line number of the first malformed or non-triangular record.
    """
    fmt = _format_of(path, format)
    verts, faces = _READERS[fmt](path)
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _fmt(x):
    return repr(float(x))


def save_mesh(mesh, path, format=None):
    fmt = _format_of(path, format)
    v, f = mesh.vertices, mesh.faces
    out = []
    if fmt == "off":
        out.append("OFF")
        out.append(f"{len(v)} {len(f)} {mesh.n_edges}")
        out += [" ".join(_fmt(c) for c in p) for p in v]
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    elif fmt == "obj":
        out += ["v " + " ".join(_fmt(c) for c in p) for p in v]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    else:
        out += [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(v)}",
            "property double x",
            "property double y",
            "property double z",
            f"element face {len(f)}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
        out += [" ".join(_fmt(c) for c in p) for p in v]
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    Path(path).write_text("\n".join(out) + "\n", encoding="ascii")


def write_edge_attr(path, edges, values):
    """Write ``v_i v_j value`` lines, one per edge."""
    edges = np.asarray(edges)
    values = np.asarray(values, dtype=float)
    if len(edges) != len(values):
        raise ValueError("one value per edge required")
    lines = [f"{int(a)} {int(b)} {_fmt(x)}" for (a, b), x in zip(edges, values)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


def read_edge_attr(path):
    edges, values = [], []
    for lineno, tokens in _content_lines(path):
        if len(tokens) != 3:
            raise MeshParseError(path, lineno, "expected 'v_i v_j value'")
        edges.append((int(tokens[0]), int(tokens[1])))
        values.append(float(tokens[2]))
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(values)
