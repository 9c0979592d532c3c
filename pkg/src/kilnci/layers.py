"""Layers, component recipes, and image recipes.

Recipes use a strict ``KEY = value`` line grammar (one key per line, ``#``
comments, whitespace-separated list values).  Layers shadow each other by
descending priority; ties break by layer name so visibility is total and
deterministic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import LayerError, RecipeError
from .hashing import canonical_json_digest, is_token, sha256_text
from .manifest import WorkspaceState

TASK_NAMES = ("fetch", "configure", "compile", "install", "package")

_SRC_RE = re.compile(r"project://([A-Za-z0-9][A-Za-z0-9._-]*)")

_RECIPE_KEYS = {
    "NAME", "VERSION", "DEPENDS", "RDEPENDS", "SRC",
    "COST_FETCH", "COST_CONFIGURE", "COST_COMPILE", "COST_INSTALL", "COST_PACKAGE",
    "KERNEL_MODULE", "AUTOLOAD",
}
_IMAGE_KEYS = {"IMAGE_NAME", "INSTALL"}
_LAYER_KEYS = {"LAYER_NAME", "LAYER_PRIORITY"}


def _parse_kv_lines(text: str, allowed: set[str], what: str) -> dict[str, tuple[str, int]]:
    """Shared ``KEY = value`` scanner; returns key -> (value, line number)."""
    result: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise RecipeError(f"{what}: line {lineno}: expected KEY = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in allowed:
            raise RecipeError(f"{what}: line {lineno}: unknown key {key!r}")
        if key in result:
            raise RecipeError(f"{what}: line {lineno}: duplicate key {key!r}")
        result[key] = (value, lineno)
    return result


def _single_token(value: str, key: str, what: str, lineno: int) -> str:
    if not is_token(value):
        raise RecipeError(f"{what}: line {lineno}: {key} must be a single token, got {value!r}")
    return value


def _bool_value(value: str, key: str, what: str, lineno: int) -> bool:
    if value not in ("true", "false"):
        raise RecipeError(f"{what}: line {lineno}: {key} must be true or false, got {value!r}")
    return value == "true"


def _cost_value(value: str, key: str, what: str, lineno: int) -> int:
    try:
        cost = int(value)
    except ValueError:
        cost = -1
    if cost < 0:
        raise RecipeError(f"{what}: line {lineno}: {key} must be a nonnegative integer")
    return cost


@dataclass(frozen=True)
class Recipe:
    name: str
    version: str
    depends: tuple[str, ...] = ()
    rdepends: tuple[str, ...] = ()
    src: str | None = None
    task_costs: tuple[tuple[str, int], ...] = tuple((t, 1) for t in TASK_NAMES)
    kernel_module: bool = False
    autoload: bool = False
    # Original file text, kept for content hashing; not part of equality.
    text: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.autoload and not self.kernel_module:
            raise RecipeError(f"recipe {self.name}: autoload requires kernel_module")
        unknown = {task for task, _ in self.task_costs} - set(TASK_NAMES)
        if unknown:
            raise RecipeError(f"recipe {self.name}: unknown task cost(s) {sorted(unknown)}")

    def cost(self, task_name: str) -> int:
        return dict(self.task_costs)[task_name]

    @property
    def src_project(self) -> str | None:
        if self.src is None:
            return None
        match = _SRC_RE.fullmatch(self.src)
        assert match is not None  # validated at parse/construction
        return match.group(1)

    def text_digest(self) -> str:
        return sha256_text(self.text if self.text is not None else serialize_recipe(self))

    def semantic_digest(self) -> str:
        """Digest of build-relevant content only: comments and costs excluded."""
        return canonical_json_digest({
            "name": self.name,
            "version": self.version,
            "depends": sorted(self.depends),
            "rdepends": sorted(self.rdepends),
            "src": self.src,
            "kernel_module": self.kernel_module,
            "autoload": self.autoload,
        })


@dataclass(frozen=True)
class ImageRecipe:
    name: str
    install: tuple[str, ...]
    text: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.install:
            raise RecipeError(f"image {self.name}: install list must not be empty")
        if len(set(self.install)) != len(self.install):
            raise RecipeError(f"image {self.name}: install list contains duplicates")

    def text_digest(self) -> str:
        return sha256_text(self.text if self.text is not None else serialize_image_recipe(self))

    def semantic_digest(self) -> str:
        return canonical_json_digest({"name": self.name, "install": sorted(self.install)})


def parse_recipe(text: str, what: str = "recipe") -> Recipe:
    kv = _parse_kv_lines(text, _RECIPE_KEYS, what)
    for required in ("NAME", "VERSION"):
        if required not in kv:
            raise RecipeError(f"{what}: missing {required}")
    name = _single_token(kv["NAME"][0], "NAME", what, kv["NAME"][1])
    version = _single_token(kv["VERSION"][0], "VERSION", what, kv["VERSION"][1])

    def tokens(key: str) -> tuple[str, ...]:
        if key not in kv:
            return ()
        value, lineno = kv[key]
        items = tuple(value.split())
        for item in items:
            _single_token(item, key, what, lineno)
        return items

    src = None
    if "SRC" in kv:
        value, lineno = kv["SRC"]
        if not _SRC_RE.fullmatch(value):
            raise RecipeError(f"{what}: line {lineno}: SRC must look like project://<name>")
        src = value

    costs = []
    for task in TASK_NAMES:
        key = f"COST_{task.upper()}"
        if key in kv:
            costs.append((task, _cost_value(kv[key][0], key, what, kv[key][1])))
        else:
            costs.append((task, 1))

    kernel_module = _bool_value(kv["KERNEL_MODULE"][0], "KERNEL_MODULE", what, kv["KERNEL_MODULE"][1]) \
        if "KERNEL_MODULE" in kv else False
    autoload = _bool_value(kv["AUTOLOAD"][0], "AUTOLOAD", what, kv["AUTOLOAD"][1]) \
        if "AUTOLOAD" in kv else False
    if autoload and not kernel_module:
        raise RecipeError(f"{what}: AUTOLOAD = true requires KERNEL_MODULE = true")

    return Recipe(
        name=name,
        version=version,
        depends=tokens("DEPENDS"),
        rdepends=tokens("RDEPENDS"),
        src=src,
        task_costs=tuple(costs),
        kernel_module=kernel_module,
        autoload=autoload,
        text=text,
    )


def serialize_recipe(r: Recipe) -> str:
    lines = [f"NAME = {r.name}", f"VERSION = {r.version}"]
    if r.src is not None:
        lines.append(f"SRC = {r.src}")
    if r.depends:
        lines.append("DEPENDS = " + " ".join(r.depends))
    if r.rdepends:
        lines.append("RDEPENDS = " + " ".join(r.rdepends))
    for task, cost in r.task_costs:
        if cost != 1:
            lines.append(f"COST_{task.upper()} = {cost}")
    if r.kernel_module:
        lines.append("KERNEL_MODULE = true")
    if r.autoload:
        lines.append("AUTOLOAD = true")
    return "\n".join(lines) + "\n"


def parse_image_recipe(text: str, what: str = "image") -> ImageRecipe:
    kv = _parse_kv_lines(text, _IMAGE_KEYS, what)
    for required in ("IMAGE_NAME", "INSTALL"):
        if required not in kv:
            raise RecipeError(f"{what}: missing {required}")
    name = _single_token(kv["IMAGE_NAME"][0], "IMAGE_NAME", what, kv["IMAGE_NAME"][1])
    value, lineno = kv["INSTALL"]
    install = tuple(value.split())
    if not install:
        raise RecipeError(f"{what}: line {lineno}: INSTALL must not be empty")
    for item in install:
        _single_token(item, "INSTALL", what, lineno)
    if len(set(install)) != len(install):
        raise RecipeError(f"{what}: line {lineno}: INSTALL contains duplicates")
    return ImageRecipe(name=name, install=install, text=text)


def serialize_image_recipe(img: ImageRecipe) -> str:
    return f"IMAGE_NAME = {img.name}\nINSTALL = {' '.join(img.install)}\n"


@dataclass(frozen=True)
class Layer:
    name: str
    priority: int
    recipes: tuple[Recipe, ...] = ()
    image_recipes: tuple[ImageRecipe, ...] = ()
    # Workspace project that provided this layer, when discovered from one.
    project: str | None = field(default=None, compare=False)

    def __post_init__(self):
        names = [r.name for r in self.recipes]
        if len(set(names)) != len(names):
            raise LayerError(f"layer {self.name}: duplicate recipe names")
        image_names = [i.name for i in self.image_recipes]
        if len(set(image_names)) != len(image_names):
            raise LayerError(f"layer {self.name}: duplicate image names")


@dataclass(frozen=True)
class LayerSet:
    """Layers ordered by descending priority, ties by name ascending."""

    layers: tuple[Layer, ...]

    @classmethod
    def from_layers(cls, layers: list[Layer]) -> "LayerSet":
        ordered = sorted(layers, key=lambda l: (-l.priority, l.name))
        # Equal-priority layers may not both define the same image.
        seen: dict[str, Layer] = {}
        for layer in ordered:
            for image in layer.image_recipes:
                if image.name in seen and seen[image.name].priority == layer.priority:
                    raise LayerError(
                        f"image {image.name!r} defined by equal-priority layers "
                        f"{seen[image.name].name!r} and {layer.name!r}"
                    )
                seen.setdefault(image.name, layer)
        return cls(layers=tuple(ordered))

    def visible_recipes(self) -> dict[str, Recipe]:
        visible: dict[str, Recipe] = {}
        for layer in self.layers:
            for recipe in layer.recipes:
                visible.setdefault(recipe.name, recipe)
        return visible

    def visible_images(self) -> dict[str, ImageRecipe]:
        visible: dict[str, ImageRecipe] = {}
        for layer in self.layers:
            for image in layer.image_recipes:
                visible.setdefault(image.name, image)
        return visible

    def image(self, name: str) -> ImageRecipe:
        images = self.visible_images()
        if name not in images:
            raise LayerError(f"unknown image {name!r}; known: {sorted(images)}")
        return images[name]

    def recipes_from_project(self, project: str) -> list[Recipe]:
        """Recipes associated with a workspace project.

        A recipe belongs to a project either by living in a layer that
        project provides or by sourcing it via ``project://``.
        """
        out = {}
        for layer in self.layers:
            if layer.project == project:
                for recipe in layer.recipes:
                    out[recipe.name] = recipe
        for name, recipe in self.visible_recipes().items():
            if recipe.src_project == project:
                out[name] = recipe
        return [out[name] for name in sorted(out)]


def _parse_layer_conf(text: str, what: str) -> tuple[str, int]:
    kv = _parse_kv_lines(text, _LAYER_KEYS, what)
    for required in ("LAYER_NAME", "LAYER_PRIORITY"):
        if required not in kv:
            raise RecipeError(f"{what}: missing {required}")
    name = _single_token(kv["LAYER_NAME"][0], "LAYER_NAME", what, kv["LAYER_NAME"][1])
    priority = _cost_value(kv["LAYER_PRIORITY"][0], "LAYER_PRIORITY", what, kv["LAYER_PRIORITY"][1])
    return name, priority


def load_layers(ws: WorkspaceState) -> LayerSet:
    """Discover layers in a synced workspace and apply shadowing.

    A project directory is a layer iff it contains ``conf/layer.conf``.
    All ``recipes/**/*.recipe`` and ``images/*.image`` files are parsed;
    any parse failure is reported with the offending file path.
    """
    layers: list[Layer] = []
    for entry in ws.entries:
        base = ws.root / entry.path
        conf = base / "conf" / "layer.conf"
        if not conf.is_file():
            continue
        name, priority = _parse_layer_conf(conf.read_text(encoding="utf-8"), str(conf))
        recipes = []
        recipes_dir = base / "recipes"
        if recipes_dir.is_dir():
            for path in sorted(recipes_dir.rglob("*.recipe")):
                recipes.append(parse_recipe(path.read_text(encoding="utf-8"), str(path)))
        images = []
        images_dir = base / "images"
        if images_dir.is_dir():
            for path in sorted(images_dir.glob("*.image")):
                images.append(parse_image_recipe(path.read_text(encoding="utf-8"), str(path)))
        layers.append(Layer(
            name=name,
            priority=priority,
            recipes=tuple(recipes),
            image_recipes=tuple(images),
            project=entry.name,
        ))
    if not layers:
        raise LayerError(f"workspace {ws.root} contains no layer (no conf/layer.conf found)")
    return LayerSet.from_layers(layers)


def resolve_packages(img: ImageRecipe, ls: LayerSet) -> list[Recipe]:
    """Close the image install list under runtime dependencies.

    Returns one Recipe per package, sorted by name; the result is independent
    of install-list order and layer discovery order.
    """
    visible = ls.visible_recipes()

    def lookup(name: str, wanted_by: str) -> Recipe:
        if name not in visible:
            raise LayerError(f"package {name!r} (wanted by {wanted_by}) does not resolve to a recipe")
        return visible[name]

    closure: dict[str, Recipe] = {}
    stack = [(name, img.name) for name in img.install]
    while stack:
        name, wanted_by = stack.pop()
        if name in closure:
            continue
        recipe = lookup(name, wanted_by)
        closure[name] = recipe
        for dep in recipe.rdepends:
            stack.append((dep, name))

    # Reject runtime-dependency cycles inside the closure.
    state: dict[str, int] = {}  # 1 = on stack, 2 = done

    def visit(name: str, path: list[str]) -> None:
        state[name] = 1
        path.append(name)
        for dep in closure[name].rdepends:
            if state.get(dep) == 1:
                cycle = path[path.index(dep):] + [dep]
                raise LayerError("rdepends cycle: " + " -> ".join(cycle))
            if state.get(dep) != 2:
                visit(dep, path)
        path.pop()
        state[name] = 2

    for name in sorted(closure):
        if state.get(name) != 2:
            visit(name, [])

    return [closure[name] for name in sorted(closure)]
