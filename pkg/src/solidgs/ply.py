"""Minimal PLY reader/writer (binary little-endian write; binary or ASCII read)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


def write_ply(path, vertex: dict[str, np.ndarray], faces: np.ndarray | None = None,
              comments: list[str] = ()) -> None:
    """Write vertex properties (name -> 1-D array, dtype preserved) and optional triangles."""
    names = list(vertex)
    n = len(vertex[names[0]]) if names else 0
    cols = []
    for name in names:
        a = np.asarray(vertex[name])
        if a.shape != (n,):
            raise PlyError(f"property {name!r} has shape {a.shape}, expected ({n},)")
        cols.append((name, a.dtype.newbyteorder("<").str))
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property {_NP_TO_PLY[np.dtype(dt).str[1:]]} {name}" for name, dt in cols]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")
    rec = np.empty(n, dtype=cols)
    for name, _ in cols:
        rec[name] = vertex[name]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())
        if faces is not None:
            frec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            frec["n"] = 3
            frec["idx"] = faces
            f.write(frec.tobytes())


def read_ply(path):
    """Return ``(vertex_dict, faces_or_None, comments)``."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    comments = []
    elements = []  # (name, count, props); props: (name, dtype) or (name, count_dtype, idx_dtype)
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment":
            comments.append(line[len("comment "):])
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"{path}: property before element")
            try:
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                else:
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            except KeyError as exc:
                raise PlyError(f"{path}: unknown PLY type {exc}") from None
    if fmt not in ("binary_little_endian", "ascii"):
        raise PlyError(f"{path}: unsupported PLY format {fmt!r}")

    vertex, faces = {}, None
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            chunk = [r.split() for r in rows[pos:pos + count]]
            pos += count
            if name == "vertex":
                arr = np.array(chunk, dtype=np.float64).reshape(count, -1)
                for k, (pname, dt) in enumerate(props):
                    vertex[pname] = arr[:, k].astype(dt)
            elif name == "face":
                faces = np.array([[int(x) for x in r[1:4]] for r in chunk], dtype=np.int64).reshape(-1, 3)
        return vertex, faces, comments

    offset = body_start
    for name, count, props in elements:
        if any(len(p) == 3 for p in props):
            if len(props) != 1:
                raise PlyError(f"{path}: mixed list/scalar element {name!r} unsupported")
            _, cdt, idt = props[0]
            dt = np.dtype([("n", "<" + cdt), ("idx", "<" + idt, (3,))])
            rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            if count and np.any(rec["n"] != 3):
                raise PlyError(f"{path}: only triangle faces are supported")
            offset += dt.itemsize * count
            if name == "face":
                faces = rec["idx"].astype(np.int64)
            continue
        dt = np.dtype([(pname, "<" + pdt) for pname, pdt in props])
        rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        offset += dt.itemsize * count
        if name == "vertex":
            vertex = {pname: rec[pname].copy() for pname, _ in props}
    return vertex, faces, comments
