"""Two-level datasets: typed blocks, CSV ingestion/export and validation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ROLES = ("response", "group", "continuous", "categorical", "dichotomous", "fixed-only", "ignore")
MISSING_TOKENS = {"", "na", "nan", "null", "none"}


class DataError(ValueError):
    """Invalid input data, optionally located at a (row, column) cell."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    row: int | None = None
    column: str | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations nested in groups with continuous, categorical and binary blocks.

    ``groups`` holds 0-based codes into ``group_labels``; ``V`` holds 1-based
    category codes into ``levels[r]``.  ``y`` may be ``None`` for data that are
    only used for prediction.
    """

    y: np.ndarray | None
    groups: np.ndarray
    group_labels: tuple
    U: np.ndarray
    V: np.ndarray
    D: np.ndarray
    X_fixed: np.ndarray
    u_names: tuple = ()
    v_names: tuple = ()
    d_names: tuple = ()
    fixed_names: tuple = ()
    levels: tuple = ()
    ising_domain: str = "01"
    response_name: str = "y"
    group_name: str = "group"
    row_ids: tuple | None = field(default=None)

    def __post_init__(self):
        n = self.groups.shape[0]
        arrays = {
            "U": np.asarray(self.U, dtype=float).reshape(n, -1),
            "V": np.asarray(self.V, dtype=int).reshape(n, -1),
            "D": np.asarray(self.D, dtype=float).reshape(n, -1),
            "X_fixed": np.asarray(self.X_fixed, dtype=float).reshape(n, -1),
            "groups": np.asarray(self.groups, dtype=int),
        }
        if self.y is not None:
            arrays["y"] = np.asarray(self.y, dtype=float)
        for name, arr in arrays.items():
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_obs(self):
        return int(self.groups.shape[0])

    @property
    def n_groups(self):
        return len(self.group_labels)

    @property
    def p(self):
        return self.U.shape[1]

    @property
    def q(self):
        return self.V.shape[1]

    @property
    def h(self):
        return self.D.shape[1]

    @property
    def n_categories(self):
        return tuple(len(lv) for lv in self.levels)

    def group_sizes(self):
        return np.bincount(self.groups, minlength=self.n_groups)

    def subset(self, rows):
        """Row subset; group and category label tables are kept unchanged."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return replace(
            self,
            y=None if self.y is None else self.y[rows],
            groups=self.groups[rows], U=self.U[rows], V=self.V[rows], D=self.D[rows],
            X_fixed=self.X_fixed[rows],
            row_ids=None if self.row_ids is None else tuple(self.row_ids[i] for i in rows),
        )

    def roles(self):
        """Column-role manifest that reproduces this dataset's coding on reload."""
        out = {}
        if self.y is not None:
            out[self.response_name] = "response"
        out[self.group_name] = {"role": "group", "levels": list(self.group_labels)}
        for name in self.u_names:
            out[name] = "continuous"
        for name, lv in zip(self.v_names, self.levels):
            out[name] = {"role": "categorical", "levels": list(lv)}
        for name in self.d_names:
            out[name] = "dichotomous"
        for name in self.fixed_names:
            out[name] = "fixed-only"
        return out

    def equals(self, other):
        """Equality of typed content (labels, blocks and names)."""
        if not isinstance(other, Dataset):
            return False
        meta = ("group_labels", "u_names", "v_names", "d_names", "fixed_names", "levels",
                "ising_domain", "response_name", "group_name")
        for k in meta:
            a, b = getattr(self, k), getattr(other, k)
            if k == "levels":
                a, b = tuple(map(tuple, a)), tuple(map(tuple, b))
            elif not isinstance(a, str):
                a, b = tuple(a), tuple(b)
            if a != b:
                return False
        if (self.y is None) != (other.y is None):
            return False
        pairs = [(self.groups, other.groups), (self.U, other.U), (self.V, other.V),
                 (self.D, other.D), (self.X_fixed, other.X_fixed)]
        if self.y is not None:
            pairs.append((self.y, other.y))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)

    def column_roles_named(self):
        return {"continuous": self.u_names, "categorical": self.v_names,
                "dichotomous": self.d_names, "fixed-only": self.fixed_names}


def _normalize_roles(roles):
    out = {}
    for name, spec in roles.items():
        if isinstance(spec, str):
            spec = {"role": spec}
        role = spec.get("role")
        if role not in ROLES:
            raise DataError(f"unknown role {role!r} for column {name!r}; expected one of {ROLES}")
        out[name] = dict(spec)
    n_resp = sum(s["role"] == "response" for s in out.values())
    n_grp = sum(s["role"] == "group" for s in out.values())
    if n_resp > 1 or n_grp != 1:
        raise DataError("manifest needs exactly one group column and at most one response column")
    return out


def _parse_float(text, row, col):
    if text.strip().lower() in MISSING_TOKENS:
        raise DataError("missing value", row, col)
    try:
        val = float(text)
    except ValueError:
        raise DataError(f"unparseable number {text!r}", row, col) from None
    if not math.isfinite(val):
        raise DataError(f"non-finite value {text!r}", row, col)
    return val


def _parse_label(text, row, col):
    label = text.strip()
    if label.lower() in MISSING_TOKENS:
        raise DataError("missing value", row, col)
    return label


def _encode(labels, known, strict, col):
    """Map labels to codes by first appearance, extending ``known`` unless strict."""
    index = {lab: i for i, lab in enumerate(known)}
    codes = np.empty(len(labels), dtype=int)
    for i, lab in enumerate(labels):
        if lab not in index:
            if strict:
                raise DataError(f"unknown level {lab!r}; known levels: {list(known)}", i + 1, col)
            index[lab] = len(known)
            known.append(lab)
        codes[i] = index[lab]
    return codes


def load_dataset(path, roles, ising_domain="01", strict_levels=False, require_response=True):
    """Read a comma-delimited UTF-8 file with a header row into a :class:`Dataset`.

    ``roles`` maps column names to a role string or to ``{"role": ..., "levels": [...]}``.
    Declared levels fix the coding; otherwise levels are coded in order of
    first appearance.  With ``strict_levels`` an undeclared categorical level
    is an error (group labels may always be extended).
    Row numbers in errors count data rows from 1.
    """
    roles = _normalize_roles(roles)
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    col_index = {}
    for name in roles:
        if name not in header:
            if roles[name]["role"] == "response" and not require_response:
                continue
            raise DataError(f"missing column {name!r} (header: {header})")
        col_index[name] = header.index(name)
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(r)}", row=i)

    def cells(name):
        j = col_index[name]
        return [r[j] for r in rows]

    y = None
    response_name, group_name = "y", None
    U, V, D, Xf, levels = [], [], [], [], []
    u_names, v_names, d_names, f_names = [], [], [], []
    groups, group_labels = None, []
    dich = (0.0, 1.0) if ising_domain == "01" else (-1.0, 1.0)
    for name, spec in roles.items():
        role = spec["role"]
        if role == "ignore" or name not in col_index:
            if role == "response":
                response_name = name
            continue
        raw = cells(name)
        if role == "response":
            response_name = name
            vals = np.array([_parse_float(t, i + 1, name) for i, t in enumerate(raw)])
            bad = np.flatnonzero((vals != 0) & (vals != 1))
            if bad.size:
                raise DataError(f"response not binary: {raw[bad[0]]!r}", int(bad[0]) + 1, name)
            y = vals
        elif role == "group":
            group_name = name
            group_labels = list(spec.get("levels", []))
            labels = [_parse_label(t, i + 1, name) for i, t in enumerate(raw)]
            groups = _encode(labels, group_labels, False, name)
        elif role in ("continuous", "fixed-only"):
            vals = [_parse_float(t, i + 1, name) for i, t in enumerate(raw)]
            (U if role == "continuous" else Xf).append(vals)
            (u_names if role == "continuous" else f_names).append(name)
        elif role == "categorical":
            known = list(spec.get("levels", []))
            strict = strict_levels and bool(known)
            labels = [_parse_label(t, i + 1, name) for i, t in enumerate(raw)]
            V.append(_encode(labels, known, strict, name) + 1)
            levels.append(tuple(known))
            v_names.append(name)
        elif role == "dichotomous":
            vals = np.array([_parse_float(t, i + 1, name) for i, t in enumerate(raw)])
            bad = np.flatnonzero((vals != dich[0]) & (vals != dich[1]))
            if bad.size:
                raise DataError(f"dichotomous value {raw[bad[0]]!r} outside domain {ising_domain}",
                                int(bad[0]) + 1, name)
            D.append(vals)
            d_names.append(name)
    n = len(rows)

    def block(cols, dtype=float):
        return np.array(cols, dtype=dtype).T.reshape(n, len(cols))

    return Dataset(
        y=y, groups=groups, group_labels=tuple(group_labels),
        U=block(U), V=block(V, int), D=block(D), X_fixed=block(Xf),
        u_names=tuple(u_names), v_names=tuple(v_names), d_names=tuple(d_names),
        fixed_names=tuple(f_names), levels=tuple(levels), ising_domain=ising_domain,
        response_name=response_name, group_name=group_name,
    )


def _fmt(x):
    return repr(float(x))


def _fmt_binary(x):
    return str(int(x))


def save_dataset(ds, path):
    """Write ``ds`` as CSV (columns in manifest order) and return its role manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    roles = ds.roles()
    cols = []
    for name, spec in roles.items():
        role = spec if isinstance(spec, str) else spec["role"]
        if role == "response":
            cols.append([_fmt_binary(v) for v in ds.y])
        elif role == "group":
            cols.append([ds.group_labels[g] for g in ds.groups])
        elif role == "continuous":
            cols.append([_fmt(v) for v in ds.U[:, ds.u_names.index(name)]])
        elif role == "categorical":
            r = ds.v_names.index(name)
            cols.append([ds.levels[r][c - 1] for c in ds.V[:, r]])
        elif role == "dichotomous":
            cols.append([_fmt_binary(v) for v in ds.D[:, ds.d_names.index(name)]])
        elif role == "fixed-only":
            cols.append([_fmt(v) for v in ds.X_fixed[:, ds.fixed_names.index(name)]])
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(roles))
        writer.writerows(zip(*cols))
    return roles


def validate(ds):
    """All invariant breaches of ``ds`` as a list of :class:`Violation` (empty if valid)."""
    out = []
    n = ds.n_obs
    if ds.y is not None:
        if ds.y.shape[0] != n:
            out.append(Violation("shape", "response length differs from N", column=ds.response_name))
        for i in np.flatnonzero(~np.isin(ds.y, (0.0, 1.0))):
            out.append(Violation("response", "response not binary", int(i) + 1, ds.response_name))
        if np.any(np.isnan(ds.y)):
            out.append(Violation("missing", "missing response", column=ds.response_name))
    allowed = (0.0, 1.0) if ds.ising_domain == "01" else (-1.0, 1.0)
    for l, name in enumerate(ds.d_names):
        for i in np.flatnonzero(~np.isin(ds.D[:, l], allowed)):
            out.append(Violation("dichotomous", f"value outside domain {ds.ising_domain}", int(i) + 1, name))
    for r, name in enumerate(ds.v_names):
        k = len(ds.levels[r])
        for i in np.flatnonzero((ds.V[:, r] < 1) | (ds.V[:, r] > k)):
            out.append(Violation("categorical", f"category code outside 1..{k}", int(i) + 1, name))
    for blk, names in ((ds.U, ds.u_names), (ds.X_fixed, ds.fixed_names)):
        for j, name in enumerate(names):
            if np.any(~np.isfinite(blk[:, j])):
                out.append(Violation("missing", "missing or non-finite value", column=name))
    if np.any((ds.groups < 0) | (ds.groups >= ds.n_groups)):
        out.append(Violation("group", "group code outside label table", column=ds.group_name))
    else:
        sizes = ds.group_sizes()
        for j in np.flatnonzero(sizes == 0):
            out.append(Violation("empty group", f"empty group {ds.group_labels[j]!r}", column=ds.group_name))
        if sizes.sum() != n:
            out.append(Violation("group", "group sizes do not sum to N", column=ds.group_name))
    return out


def design_matrix(ds, formula, intercept=True):
    """Fixed-effects design for the regression component.

    ``formula`` lists covariate names from any block.  Categorical covariates
    are dummy coded against their first level.  Returns ``(F, column_names)``.
    """
    cols, names = [], []
    if intercept:
        cols.append(np.ones(ds.n_obs))
        names.append("(Intercept)")
    for name in formula:
        if name in ds.u_names:
            cols.append(ds.U[:, ds.u_names.index(name)])
            names.append(name)
        elif name in ds.v_names:
            r = ds.v_names.index(name)
            for s in range(2, len(ds.levels[r]) + 1):
                cols.append((ds.V[:, r] == s).astype(float))
                names.append(f"{name}[{ds.levels[r][s - 1]}]")
        elif name in ds.d_names:
            cols.append(ds.D[:, ds.d_names.index(name)])
            names.append(name)
        elif name in ds.fixed_names:
            cols.append(ds.X_fixed[:, ds.fixed_names.index(name)])
            names.append(name)
        else:
            raise DataError(f"formula term {name!r} is not a column of the dataset")
    F = np.column_stack(cols) if cols else np.zeros((ds.n_obs, 0))
    return F, names
