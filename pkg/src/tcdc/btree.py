"""Clustered B-tree over u64 keys with fixed-length records.

The root always lives at page 1; a root split moves the root's content
into two fresh pages so the root never changes address. Splits are
logged as :class:`~tcdc.log.SmoRecord` page images and redone
physiologically before any logical redo.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional

from .log import PageImage, SmoRecord
from .storage import (
    INDEX,
    LEAF,
    ROOT_PID,
    BufferPool,
    Page,
    PageFile,
    index_capacity,
    leaf_capacity,
)


class IntegrityError(Exception):
    pass


class AllocationError(Exception):
    pass


def initial_value(key: int, payload: int) -> bytes:
    """Deterministic value a bulk-loaded row starts with."""
    return (key.to_bytes(8, "little") * (payload // 8 + 1))[:payload]


@dataclass
class LoadReport:
    rows: int
    leaf_pages: int
    index_pages: int
    height: int


def bulk_load(pagefile: PageFile, items: Iterable[tuple[int, bytes]], fill: float = 1.0) -> LoadReport:
    """Build the tree bottom-up straight into the page file (pLSN 0).

    Leaves get pids 2.. in key order, index pages follow; the top index
    page (or the only leaf) is written at the root pid.
    """
    per_leaf = max(1, int(leaf_capacity(pagefile.page_size, pagefile.payload) * fill))
    fanout = index_capacity(pagefile.page_size)
    rows, last = 0, -1
    first: Optional[Page] = None  # held back: it becomes the root if alone
    level: list[tuple[int, int]] = []
    cur = Page(0)

    def emit(page: Page) -> None:
        nonlocal first
        page.pid = ROOT_PID + 1 + len(level)
        level.append((page.keys[0], page.pid))
        if first is None and len(level) == 1:
            first = page
            return
        if first is not None:
            _write_new(pagefile, first)
            first = None
        _write_new(pagefile, page)

    for key, value in items:
        if key <= last:
            raise ValueError("bulk load input must be strictly increasing")
        last = key
        if len(cur.keys) == per_leaf:
            emit(cur)
            cur = Page(0)
        cur.keys.append(key)
        cur.values.append(value)
        rows += 1
    if not level:
        cur.pid = ROOT_PID
        _write_new(pagefile, cur)
        return LoadReport(rows, 1, 0, 1)
    if cur.keys:
        emit(cur)
    if first is not None:
        _write_new(pagefile, first)
    n_leaves = len(level)
    next_pid = ROOT_PID + 1 + n_leaves
    index_pages, height, child_level = 0, 1, 0
    while True:
        height += 1
        groups = [level[i : i + fanout] for i in range(0, len(level), fanout)]
        nxt = []
        for gi, g in enumerate(groups):
            keys = [k for k, _ in g]
            if gi == 0:
                keys[0] = 0
            if len(groups) == 1:
                pid = ROOT_PID
            else:
                pid, next_pid = next_pid, next_pid + 1
            _write_new(pagefile, Page(pid, INDEX, 0, child_level + 1, keys, children=[p for _, p in g]))
            index_pages += 1
            nxt.append((keys[0], pid))
        if len(groups) == 1:
            return LoadReport(rows, n_leaves, index_pages, height)
        level = nxt
        child_level += 1


def _write_new(pagefile: PageFile, page: Page) -> None:
    pagefile.note_allocated(page.pid)
    pagefile.write(page)


def _image(page: Page) -> PageImage:
    if page.is_leaf:
        return PageImage(page.pid, True, list(page.keys), values=list(page.values))
    return PageImage(page.pid, False, list(page.keys), children=list(page.children), level=page.level)


def _install(page: Page, image: PageImage) -> None:
    page.kind = LEAF if image.is_leaf else INDEX
    page.level = image.level
    page.keys = list(image.keys)
    page.values = list(image.values) if image.is_leaf else []
    page.children = [] if image.is_leaf else list(image.children)


class BTree:
    def __init__(
        self,
        pool: BufferPool,
        table_id: int = 1,
        log_smo: Optional[Callable[[SmoRecord], int]] = None,
    ):
        self.pool = pool
        self.file = pool.file
        self.table_id = table_id
        self.leaf_cap = leaf_capacity(self.file.page_size, self.file.payload)
        self.index_cap = index_capacity(self.file.page_size)
        self.log_smo = log_smo
        self.root_pid = ROOT_PID

    # -- search --------------------------------------------------------

    def find(self, key: int) -> int:
        """PID of the leaf covering ``key``. Only index pages are fetched."""
        get = self.pool.get_page
        page = get(self.root_pid)
        if page.is_leaf:
            return page.pid
        while True:
            child = page.children[bisect_right(page.keys, key) - 1]
            if page.level == 1:
                return child
            page = get(child)

    def path_to(self, key: int) -> list[Page]:
        """Pages from the root down to, and including, the covering leaf."""
        get = self.pool.get_page
        page = get(self.root_pid)
        path = [page]
        while not page.is_leaf:
            page = get(page.children[bisect_right(page.keys, key) - 1])
            path.append(page)
        return path

    @property
    def height(self) -> int:
        root = self.pool.get_page(self.root_pid)
        return root.level + 1

    def get(self, key: int) -> Optional[bytes]:
        return self.lookup(self.pool.get_page(self.find(key)), key)

    @staticmethod
    def lookup(leaf: Page, key: int) -> Optional[bytes]:
        i = bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            return leaf.values[i]
        return None

    # -- update path ---------------------------------------------------

    def locate_for_update(self, key: int, inserting: bool = True) -> Page:
        """Fetch the covering leaf, splitting first if an insert needs room."""
        path = self.path_to(key)
        leaf = path[-1]
        if inserting and len(leaf.keys) >= self.leaf_cap:
            i = bisect_left(leaf.keys, key)
            if i == len(leaf.keys) or leaf.keys[i] != key:
                self._split(path)
                leaf = self.path_to(key)[-1]
        return leaf

    @staticmethod
    def apply(page: Page, key: int, value: Optional[bytes]) -> None:
        """Write ``value`` for ``key`` in ``page``; None removes the key."""
        keys = page.keys
        i = bisect_left(keys, key)
        present = i < len(keys) and keys[i] == key
        if value is None:
            if present:
                del keys[i]
                del page.values[i]
        elif present:
            page.values[i] = value
        else:
            keys.insert(i, key)
            page.values.insert(i, value)

    def upsert(self, key: int, value: bytes, lsn: int) -> int:
        """Apply a write whose LSN was assigned after any split it needed."""
        leaf = self.locate_for_update(key)
        if lsn <= leaf.p_lsn:
            raise ValueError(f"LSN {lsn} does not follow page {leaf.pid} pLSN {leaf.p_lsn}")
        self.apply(leaf, key, value)
        self.pool.mark_dirty(leaf.pid, lsn)
        return leaf.pid

    def _new_page(self, kind: int, level: int) -> Page:
        try:
            pid = self.file.allocate()
        except OSError as exc:  # pragma: no cover - disk full
            raise AllocationError(str(exc)) from exc
        return self.pool.new_page(pid, kind, level)

    def _split(self, path: list[Page]) -> int:
        """Split the leaf at the end of ``path`` (and any overflowing
        ancestors), log one SMO record, and dirty every touched page."""
        if self.log_smo is None:
            raise IntegrityError("split required but SMO logging is unavailable")
        touched: dict[int, Page] = {}
        i = len(path) - 1
        node = path[i]
        while True:
            mid = len(node.keys) // 2
            if node.pid == self.root_pid:
                left = self._new_page(node.kind, node.level)
                right = self._new_page(node.kind, node.level)
                left.keys, right.keys = node.keys[:mid], node.keys[mid:]
                if node.is_leaf:
                    left.values, right.values = node.values[:mid], node.values[mid:]
                else:
                    left.children, right.children = node.children[:mid], node.children[mid:]
                    left.keys[0] = 0
                node.kind = INDEX
                node.level += 1
                node.keys = [0, right.keys[0]]
                node.values = []
                node.children = [left.pid, right.pid]
                touched.update({node.pid: node, left.pid: left, right.pid: right})
                break
            right = self._new_page(node.kind, node.level)
            right.keys, node.keys = node.keys[mid:], node.keys[:mid]
            if node.is_leaf:
                right.values, node.values = node.values[mid:], node.values[:mid]
            else:
                right.children, node.children = node.children[mid:], node.children[:mid]
            sep = right.keys[0]
            parent = path[i - 1]
            j = bisect_right(parent.keys, sep)
            parent.keys.insert(j, sep)
            parent.children.insert(j, right.pid)
            touched.update({node.pid: node, right.pid: right, parent.pid: parent})
            if len(parent.keys) <= self.index_cap:
                break
            i -= 1
            node = parent
        rec = SmoRecord([_image(p) for p in sorted(touched.values(), key=lambda p: p.pid)])
        lsn = self.log_smo(rec)
        for pid in sorted(touched):
            self.pool.mark_dirty(pid, lsn, update=False)
        return lsn

    # -- recovery ------------------------------------------------------

    def redo_smo(self, rec: SmoRecord) -> int:
        """Install each image whose page predates the SMO; return pages redone."""
        redone = 0
        for image in rec.images:
            self.file.note_allocated(image.pid)
            page = self.pool.get_page(image.pid)
            if page.p_lsn < rec.lsn:
                _install(page, image)
                self.pool.mark_dirty(image.pid, rec.lsn, update=False)
                redone += 1
        return redone

    def preload_index(self, pin: bool = True) -> int:
        """Bring every internal page into the cache, one level at a time.

        With ``pin`` the pages stay resident for the rest of recovery.
        """
        pool = self.pool
        root = pool.get_page(self.root_pid)
        if root.is_leaf:
            return 0
        loaded = 1
        level = [root]
        while level[0].level > 1:
            children = [c for p in level for c in p.children]
            pool.prefetch(children)
            level = [pool.get_page(c) for c in children]
            loaded += len(level)
        if pin:
            stack = [root]
            while stack:
                page = stack.pop()
                pool.pin(page.pid)
                if page.level > 1:
                    stack.extend(pool.frames[c].page for c in page.children)
        return loaded

    # -- inspection ----------------------------------------------------

    def iter_leaves(self) -> Iterator[Page]:
        stack = [self.root_pid]
        while stack:
            self.pool.begin_op()
            page = self.pool.get_page(stack.pop())
            if page.is_leaf:
                yield page
            else:
                stack.extend(reversed(page.children))

    def items(self) -> Iterator[tuple[int, bytes]]:
        for leaf in self.iter_leaves():
            yield from zip(leaf.keys, leaf.values)

    def audit(self) -> None:
        """Check sortedness, separator bounds and uniform leaf depth."""
        depths: set[int] = set()
        last = -1

        def visit(pid: int, lo: int, hi: Optional[int], depth: int) -> None:
            nonlocal last
            self.pool.begin_op()
            page = self.pool.get_page(pid)
            keys = page.keys
            if any(a >= b for a, b in zip(keys, keys[1:])):
                raise IntegrityError(f"page {pid}: keys not strictly sorted")
            if page.is_leaf:
                depths.add(depth)
                for k in keys:
                    if k < lo or (hi is not None and k >= hi) or k <= last:
                        raise IntegrityError(f"leaf {pid}: key {k} outside [{lo}, {hi})")
                    last = k
                return
            if not keys or len(keys) != len(page.children):
                raise IntegrityError(f"index page {pid}: malformed entries")
            if keys[0] > lo:
                raise IntegrityError(f"index page {pid}: first separator {keys[0]} above {lo}")
            bounds = [lo] + keys[1:] + [hi]
            for n, child in enumerate(page.children):
                visit(child, bounds[n], bounds[n + 1], depth + 1)

        visit(self.root_pid, 0, None, 1)
        if len(depths) > 1:
            raise IntegrityError(f"leaves at different depths: {sorted(depths)}")
