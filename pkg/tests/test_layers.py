import pytest

from kilnci.errors import LayerError, RecipeError
from kilnci.layers import (
    ImageRecipe,
    Layer,
    LayerSet,
    Recipe,
    load_layers,
    parse_image_recipe,
    parse_recipe,
    resolve_packages,
    serialize_image_recipe,
    serialize_recipe,
)
from oracles import oracle_recipe_semantic_digest

HELLOWORLD_RECIPE = """\
# Application linked against libhelloworld at build and run time.
NAME = helloworld
VERSION = 1.0
SRC = project://helloworld
DEPENDS = libhelloworld
RDEPENDS = libhelloworld
COST_COMPILE = 10
"""


class TestParseRecipe:
    def test_helloworld_links_against_shared_library(self):
        r = parse_recipe(HELLOWORLD_RECIPE)
        assert r.depends == ("libhelloworld",)
        assert r.rdepends == ("libhelloworld",)
        assert r.src_project == "helloworld"
        assert r.cost("compile") == 10

    def test_minimal_recipe_gets_defaults(self):
        r = parse_recipe("NAME = a\nVERSION = 1\n")
        assert r.depends == () and r.rdepends == ()
        assert all(r.cost(t) == 1 for t in ("fetch", "configure", "compile", "install", "package"))
        assert r.kernel_module is False and r.autoload is False
        assert r.src is None

    def test_autoload_requires_kernel_module(self):
        with pytest.raises(RecipeError, match="AUTOLOAD.*KERNEL_MODULE"):
            parse_recipe("NAME = m\nVERSION = 1\nAUTOLOAD = true\n")

    def test_unknown_key(self):
        with pytest.raises(RecipeError, match="line 3: unknown key 'COLOUR'"):
            parse_recipe("NAME = a\nVERSION = 1\nCOLOUR = red\n")

    def test_missing_name(self):
        with pytest.raises(RecipeError, match="missing NAME"):
            parse_recipe("VERSION = 1\n")

    def test_negative_cost(self):
        with pytest.raises(RecipeError, match="nonnegative"):
            parse_recipe("NAME = a\nVERSION = 1\nCOST_FETCH = -3\n")

    def test_duplicate_key(self):
        with pytest.raises(RecipeError, match="duplicate key"):
            parse_recipe("NAME = a\nNAME = b\nVERSION = 1\n")

    def test_bad_src_scheme(self):
        with pytest.raises(RecipeError, match="project://"):
            parse_recipe("NAME = a\nVERSION = 1\nSRC = git://x\n")

    def test_comments_and_blank_lines_ignored(self):
        r = parse_recipe("\n# hi\nNAME = a\n\nVERSION = 1\n# bye\n")
        assert r.name == "a"

    def test_round_trip(self):
        r = parse_recipe(HELLOWORLD_RECIPE)
        assert parse_recipe(serialize_recipe(r)) == r

    def test_round_trip_kernel_module(self):
        r = Recipe(name="m", version="2.3", kernel_module=True, autoload=True,
                   task_costs=(("fetch", 2), ("configure", 1), ("compile", 15),
                               ("install", 1), ("package", 1)))
        assert parse_recipe(serialize_recipe(r)) == r

    def test_semantic_digest_ignores_comments_and_costs(self):
        base = parse_recipe(HELLOWORLD_RECIPE)
        tweaked = parse_recipe(HELLOWORLD_RECIPE + "# trailing comment\nCOST_FETCH = 9\n")
        assert base.semantic_digest() == tweaked.semantic_digest()
        assert base.text_digest() != tweaked.text_digest()

    def test_semantic_digest_matches_oracle(self):
        r = parse_recipe(HELLOWORLD_RECIPE)
        assert r.semantic_digest() == oracle_recipe_semantic_digest(
            "helloworld", "1.0", ["libhelloworld"], ["libhelloworld"],
            "project://helloworld", False, False,
        )


class TestImageRecipe:
    def test_parse_and_round_trip(self):
        img = parse_image_recipe("IMAGE_NAME = core-image-minimal\nINSTALL = a b\n")
        assert img.install == ("a", "b")
        assert parse_image_recipe(serialize_image_recipe(img)) == img

    def test_empty_install_rejected(self):
        with pytest.raises(RecipeError, match="INSTALL"):
            parse_image_recipe("IMAGE_NAME = x\nINSTALL =\n")

    def test_duplicate_install_rejected(self):
        with pytest.raises(RecipeError, match="duplicates"):
            parse_image_recipe("IMAGE_NAME = x\nINSTALL = a a\n")


def _recipe(name, **kw):
    return Recipe(name=name, version="1.0", **kw)


class TestLayerSet:
    def test_fixture_workspace_discovers_meta_custom(self, layer_set):
        assert [l.name for l in layer_set.layers] == ["meta-custom"]
        assert sorted(layer_set.visible_recipes()) == [
            "hello-mod", "helloworld", "libhelloworld",
        ]
        assert sorted(layer_set.visible_images()) == ["core-image-minimal"]

    def test_workspace_without_layers_is_an_error(self, tmp_path, store):
        from kilnci.manifest import Manifest, ProjectEntry, sync_workspace

        m = Manifest(projects=(
            ProjectEntry("libhelloworld", "src", "kirkstone"),
        ))
        ws = sync_workspace(m, store, tmp_path / "empty-ws")
        with pytest.raises(LayerError, match="no layer"):
            load_layers(ws)

    def test_higher_priority_layer_shadows(self):
        low = Layer(name="low", priority=5, recipes=(_recipe("x", src=None),))
        high = Layer(name="high", priority=10,
                     recipes=(_recipe("x", depends=("y",)), _recipe("y")))
        ls = LayerSet.from_layers([low, high])
        assert ls.visible_recipes()["x"].depends == ("y",)

    def test_equal_priority_duplicate_image_rejected(self):
        img = ImageRecipe(name="img", install=("x",))
        a = Layer(name="a", priority=5, image_recipes=(img,))
        b = Layer(name="b", priority=5, image_recipes=(img,))
        with pytest.raises(LayerError, match="equal-priority"):
            LayerSet.from_layers([a, b])

    def test_layer_order_is_priority_then_name(self):
        layers = [Layer(name=n, priority=p) for n, p in (("b", 5), ("a", 5), ("c", 9))]
        ls = LayerSet.from_layers(layers)
        assert [l.name for l in ls.layers] == ["c", "a", "b"]


class TestResolvePackages:
    def test_runtime_closure_of_fixture_image(self, layer_set):
        img = layer_set.image("core-image-minimal")
        closure = resolve_packages(img, layer_set)
        assert [r.name for r in closure] == ["hello-mod", "helloworld", "libhelloworld"]

    def test_install_via_rdepends_only(self):
        lib = _recipe("libhelloworld")
        app = _recipe("helloworld", rdepends=("libhelloworld",))
        ls = LayerSet.from_layers([Layer(name="l", priority=1, recipes=(lib, app))])
        closure = resolve_packages(ImageRecipe(name="i", install=("helloworld",)), ls)
        assert [r.name for r in closure] == ["helloworld", "libhelloworld"]

    def test_single_recipe_no_deps(self):
        ls = LayerSet.from_layers([Layer(name="l", priority=1, recipes=(_recipe("libhelloworld"),))])
        closure = resolve_packages(ImageRecipe(name="i", install=("libhelloworld",)), ls)
        assert [r.name for r in closure] == ["libhelloworld"]

    def test_cycle_reported_with_participants(self):
        a = _recipe("a", rdepends=("b",))
        b = _recipe("b", rdepends=("a",))
        ls = LayerSet.from_layers([Layer(name="l", priority=1, recipes=(a, b))])
        with pytest.raises(LayerError, match="cycle.*a -> b -> a|cycle.*b -> a -> b"):
            resolve_packages(ImageRecipe(name="i", install=("a",)), ls)

    def test_unresolvable_package(self):
        ls = LayerSet.from_layers([Layer(name="l", priority=1, recipes=(_recipe("a"),))])
        with pytest.raises(LayerError, match="'ghost'.*does not resolve"):
            resolve_packages(ImageRecipe(name="i", install=("a", "ghost")), ls)

    def test_result_independent_of_install_order(self, layer_set):
        img_a = ImageRecipe(name="i", install=("helloworld", "hello-mod"))
        img_b = ImageRecipe(name="i", install=("hello-mod", "helloworld"))
        names = lambda img: [r.name for r in resolve_packages(img, layer_set)]
        assert names(img_a) == names(img_b) == ["hello-mod", "helloworld", "libhelloworld"]


class TestTypeInvariants:
    def test_programmatic_autoload_without_module_rejected(self):
        with pytest.raises(RecipeError, match="autoload"):
            Recipe(name="m", version="1", autoload=True)

    def test_programmatic_unknown_task_cost_rejected(self):
        with pytest.raises(RecipeError, match="unknown task cost"):
            Recipe(name="m", version="1", task_costs=(("deploy", 1),))

    def test_programmatic_empty_install_rejected(self):
        with pytest.raises(RecipeError, match="install"):
            ImageRecipe(name="i", install=())
