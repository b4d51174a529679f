import pytest

from modules.util import BoundedCache
from modules.util import YAML
from modules.util import EnvStr
from modules.util import Failed
from modules.util import check
from modules.util import get_list


class Recorder:
    def __init__(self):
        self.resolved = {}

    def record(self, parent, attribute, value):
        self.resolved[(parent, attribute)] = value


@pytest.fixture
def checker():
    return check(Recorder())


class TestGetList:
    def test_comma_string(self):
        assert get_list("16, 32", int) == [16, 32]

    def test_sequence(self):
        assert get_list([0.5, "0.25"], float) == [0.5, 0.25]

    def test_none(self):
        assert get_list(None) is None

    def test_bad_item(self):
        with pytest.raises(ValueError):
            get_list("1, x", int)


class TestCheckForAttribute:
    def test_present_value_recorded(self, checker):
        assert checker.check_for_attribute({"run": {"seed": 4}}, "seed", parent="run", var_type="int", default=0) == 4
        assert checker.config.resolved[("run", "seed")] == 4

    def test_missing_section_uses_default(self, checker):
        assert checker.check_for_attribute({}, "lr", parent="optimizer", var_type="float", default=0.001) == 0.001

    def test_required_without_default(self, checker):
        with pytest.raises(Failed, match="not found"):
            checker.check_for_attribute({"run": {}}, "seed", parent="run", var_type="int")

    def test_default_is_none(self, checker):
        assert checker.check_for_attribute({"dataset": {"manifest": None}}, "manifest", parent="dataset", default_is_none=True) is None

    def test_int_rejects_bool_and_float(self, checker):
        for value in (True, 1.5):
            with pytest.raises(Failed, match="must an integer >= 0"):
                checker.check_for_attribute({"t": {"steps": value}}, "steps", parent="t", var_type="int", default=1)

    def test_minimum(self, checker):
        with pytest.raises(Failed, match="must a float >= 0.0"):
            checker.check_for_attribute({"o": {"lr": -1}}, "lr", parent="o", var_type="float", default=0.1)

    def test_time_parse(self, checker):
        data = {"t": {"a": "15m", "b": 90}}
        assert checker.check_for_attribute(data, "a", parent="t", var_type="time_parse", default=0) == 900
        assert checker.check_for_attribute(data, "b", parent="t", var_type="time_parse", default=0) == 90

    def test_time_parse_rejects_words(self, checker):
        with pytest.raises(Failed, match="time format"):
            checker.check_for_attribute({"t": {"a": "soon"}}, "a", parent="t", var_type="time_parse", default=0)

    def test_int_list_minimum(self, checker):
        with pytest.raises(Failed, match="list of integers >= 1"):
            checker.check_for_attribute({"b": {"mlp": [16, 0]}}, "mlp", parent="b", var_type="int_list", default=[8], min_num=1)

    def test_choice_lists_options(self, checker):
        with pytest.raises(Failed, match="invalid input") as error:
            checker.check_for_attribute({"o": {"kind": "rmsprop"}}, "kind", parent="o", test_list={"adam": "Adam", "sgd": "SGD"})
        assert "adam (Adam)" in str(error.value)


class TestYaml:
    def test_env_tag_resolves_and_round_trips(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FPT_SCENES", "/data/scenes")
        path = tmp_path / "config.yml"
        path.write_text("dataset:\n  manifest: !ENV FPT_SCENES\n", encoding="utf-8")
        loaded = YAML(str(path))
        value = loaded.data["dataset"]["manifest"]
        assert isinstance(value, EnvStr)
        assert value == "/data/scenes"
        loaded.save()
        assert "!ENV FPT_SCENES" in path.read_text(encoding="utf-8")

    def test_missing_env_variable(self, tmp_path, monkeypatch):
        monkeypatch.delenv("FPT_NOT_SET", raising=False)
        path = tmp_path / "config.yml"
        path.write_text("run:\n  out_dir: !ENV FPT_NOT_SET\n", encoding="utf-8")
        with pytest.raises(Failed, match="FPT_NOT_SET"):
            YAML(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(Failed, match="YAML Error"):
            YAML(str(tmp_path / "none.yml"))

    def test_create_starts_empty(self, tmp_path):
        path = tmp_path / "new.yml"
        created = YAML(str(path), create=True)
        assert created.data == {}
        created.data["run"] = {"seed": 1}
        created.save()
        assert YAML(str(path)).data["run"]["seed"] == 1


class TestBoundedCache:
    def test_least_recently_used_dropped(self):
        cache = BoundedCache(2)
        cache.put("a", 1)
        cache.put("b", 2)
        assert cache.get("a") == 1
        cache.put("c", 3)
        assert "b" not in cache
        assert [key for key in ("a", "c") if key in cache] == ["a", "c"]

    def test_put_keeps_first_value(self):
        cache = BoundedCache(4)
        assert cache.put("a", 1) == 1
        assert cache.put("a", 2) == 1

    def test_zero_capacity(self):
        cache = BoundedCache(0)
        assert cache.put("a", 1) == 1
        assert len(cache) == 0
        assert cache.get("a", "missing") == "missing"
