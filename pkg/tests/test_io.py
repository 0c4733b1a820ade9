import numpy as np
import pytest

from dncplan import io
from dncplan.cli import read_grid
from dncplan.candidates import SearchGrid
from dncplan.exceptions import ParseError
from dncplan.geometry import CameraRig
from dncplan.pruning import demo_graph, demo_tensors, global_prune, taylor_importance
from dncplan.search import CandidateTable, solve_exact

from factories import (random_candidate_table, random_graph, random_map, random_mask,
                       random_plan, same_plan)


@pytest.mark.parametrize("value,text", [
    (1.0, "1"), (-0.5, "-0.5"), (0.125, "0.125"), (1.123456789, "1.123456789"),
    (-7.0, "-7"), (0.0, "0"), (1e-10, "0.000000000"),
])
def test_format_decimal(value, text):
    assert io.format_decimal(value) == text


def test_format_decimal_rejects_non_finite():
    with pytest.raises(ValueError):
        io.format_decimal(float("inf"))


def test_table_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for _ in range(10):
        table = random_candidate_table(rng)
        io.write_table(tmp_path / "t.txt", table)
        back = io.read_table(tmp_path / "t.txt")
        assert back.blocks == table.blocks
        assert back.includes_identity == table.includes_identity
        assert back.metadata == table.metadata


def test_table_parse_errors_carry_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("#dnc-candidates v1\n1\ta\t0.5\t-1\n1\tb\tnot-a-number\t-2\n")
    with pytest.raises(ParseError) as info:
        io.read_table(path)
    assert info.value.line == 3 and ":3:" in str(info.value)
    path.write_text("#dnc-candidates v1\n1\ta\t0.5\n")
    with pytest.raises(ParseError) as info:
        io.read_table(path)
    assert info.value.line == 2
    path.write_text("1\ta\t0.5\t1\n")
    with pytest.raises(ParseError) as info:
        io.read_table(path)
    assert info.value.line == 1
    path.write_text("#dnc-candidates v1\n1\ta\t0.5\t1\n3\tb\t0\t0\n")
    with pytest.raises(ParseError, match="blocks \\[2\\]"):
        io.read_table(path)
    path.write_text("#dnc-candidates v1\n1\ta\t0.1234567891\t1\n")
    with pytest.raises(ParseError):
        io.read_table(path)


def test_plan_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    for _ in range(20):
        plan = random_plan(rng)
        io.write_plan(tmp_path / "p.txt", plan)
        assert same_plan(io.read_plan(tmp_path / "p.txt"), plan)


def test_plan_from_solver(tmp_path):
    table = CandidateTable.from_arrays([[1.0, 0.2], [0.5, 0.1]], [[-5.0, -1.0], [-4.0, -2.0]])
    plan = solve_exact(table, -6.0)
    io.write_plan(tmp_path / "p.txt", plan)
    text = (tmp_path / "p.txt").read_text()
    assert text.splitlines()[1:3] == ["1\tc0", "2\tc1"]
    assert "#optimal=1" in text
    assert io.read_plan(tmp_path / "p.txt") == plan


def test_graph_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    for _ in range(10):
        graph = random_graph(rng)
        io.write_graph(tmp_path / "g.txt", graph)
        back = io.read_graph(tmp_path / "g.txt")
        assert back.nodes == graph.nodes
        assert back.edges == graph.edges
        assert back.groups == graph.groups


def test_graph_parse_error(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("#dnc-graph v1\nnode\ta\tConv2D\t4\t4\t-\nedge\ta\ta\tmaybe\n")
    with pytest.raises(ParseError) as info:
        io.read_graph(path)
    assert info.value.line == 3


def test_tensor_roundtrip(tmp_path):
    graph = demo_graph()
    tensors = demo_tensors(graph, iterations=2)
    manifest = io.write_tensors(tmp_path / "tensors", tensors)
    back = io.read_tensors(manifest)
    assert set(back) == set(tensors)
    for lid, (w, grads) in tensors.items():
        assert np.array_equal(back[lid][0], w)
        assert len(back[lid][1]) == 2
        for a, b in zip(back[lid][1], grads):
            assert np.array_equal(a, b)
    raw = (tmp_path / "tensors" / "disp_head.weight.f32").read_bytes()
    assert raw == np.asarray(tensors["disp_head"][0], dtype="<f4").tobytes()


def test_tensor_size_mismatch(tmp_path):
    manifest = io.write_tensors(tmp_path, {"a": (np.ones((2, 2)), [np.ones((2, 2))])})
    (tmp_path / "a.weight.f32").write_bytes(b"\0" * 12)
    with pytest.raises(ParseError):
        io.read_tensors(manifest)


def test_prune_plan_roundtrip(tmp_path):
    graph = demo_graph()
    plan = global_prune(taylor_importance(graph, demo_tensors(graph)), graph, 0.4)
    io.write_prune_plan(tmp_path / "p.txt", plan, ["valid=1"])
    back = io.read_prune_plan(tmp_path / "p.txt")
    assert back == plan
    assert back.channel_fraction == plan.channel_fraction


def test_pfm_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    for channels in (1, 3):
        img = random_map(rng, channels)
        io.write_pfm(tmp_path / "x.pfm", img)
        back = io.read_pfm(tmp_path / "x.pfm")
        assert back.dtype == np.float32 and back.tobytes() == img.tobytes()


def test_pfm_layout_is_bottom_up_little_endian(tmp_path):
    img = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    io.write_pfm(tmp_path / "x.pfm", img)
    raw = (tmp_path / "x.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    assert np.frombuffer(raw[-16:], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_big_endian_read(tmp_path):
    img = np.array([[1.5, -2.0]], dtype=">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + img.tobytes())
    assert io.read_pfm(tmp_path / "b.pfm").tolist() == [[1.5, -2.0]]


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    mask = random_mask(rng)
    io.write_pgm(tmp_path / "m.pgm", mask)
    assert (io.read_pgm(tmp_path / "m.pgm") == mask).all()
    raw = (tmp_path / "m.pgm").read_bytes()
    assert set(raw.split(b"\n", 3)[-1]) <= {0, 255}


def test_bad_image_headers(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(ParseError):
        io.read_pfm(tmp_path / "x.pfm")
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ParseError):
        io.read_pgm(tmp_path / "x.pgm")


def test_rig_roundtrip(tmp_path):
    rig = CameraRig(721.5377, 721.5377, 609.5593, 172.854, 0.5327119)
    io.write_rig(tmp_path / "rig.txt", rig)
    assert io.read_rig(tmp_path / "rig.txt") == rig
    (tmp_path / "r2.txt").write_text("fx=1 fy=1 cx=0 cy=0 baseline=0.1 # inline\n")
    assert io.read_rig(tmp_path / "r2.txt").baseline == 0.1
    (tmp_path / "r3.txt").write_text("fx=1 fy=1 cx=0 cy=0\nbaseline=0.1\nskew=0\n")
    with pytest.raises(ParseError) as info:
        io.read_rig(tmp_path / "r3.txt")
    assert info.value.line == 3


def test_verdict_report(tmp_path):
    text = io.dumps_verdicts([("a", True, 1.0, 0.85), ("b", False, 0.25, 0.85),
                              ("c", "ERROR:DEGENERATE", float("nan"), 0.85)])
    (tmp_path / "v.tsv").write_text(text)
    rows, footer = io.read_verdicts(tmp_path / "v.tsv")
    assert [r[1] for r in rows] == [True, False, "ERROR:DEGENERATE"]
    assert footer == {"accepted": "1", "total": "3", "rate": repr(1 / 3)}
    assert io.dumps_verdicts([]).splitlines()[-1] == "#accepted=0 #total=0 #rate=0.0"


def test_grid_file(tmp_path):
    path = tmp_path / "grid.txt"
    path.write_text("kinds=Conv3D,APC\nchannel_multipliers=0.25,0.5\nmax_layers=2\n"
                    "kernel_sizes=3\n")
    grid = read_grid(path)
    assert grid == SearchGrid(kinds=("Conv3D", "APC"), channel_multipliers=(0.25, 0.5),
                              max_layers=2, kernel_sizes=(3,))
    path.write_text("channel_multipliers=0,0.5\n")
    with pytest.raises(ParseError):
        read_grid(path)
    path.write_text("depth=3\n")
    with pytest.raises(ParseError):
        read_grid(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write(tmp_path / "out.txt", "hello\n")
    io.atomic_write(tmp_path / "out.txt", "again\n")
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]
    assert (tmp_path / "out.txt").read_text() == "again\n"
