import math
import random
from functools import lru_cache

import pytest

from fabricrpc.games import P1, P2, HexBoard, HexGame, other
from fabricrpc.mcts import PENDING, Node, NodeRef, RouteStep, Search, pack_route, ucb_scores, ucb_select, unpack_route


def make_node(k=3):
    return Node(NodeRef(0, 1), state=None, player=1, moves=list(range(k)))


def test_ucb_prefers_exploration():
    scores = ucb_scores([9, 0], [10, 1], 11, 1.414)
    assert scores[0] == pytest.approx(1.592, abs=1e-3)
    assert scores[1] == pytest.approx(2.190, abs=1e-3)

    node = make_node(2)
    node.wins, node.vis, node.vis_n = [9, 0], [10, 1], 11
    assert ucb_select(node, 1.414) == 1
    assert node.vis == [10, 2]
    assert node.vis_n == 12


def test_ucb_ties_pick_lowest_move():
    node = make_node(3)
    node.wins, node.vis, node.vis_n = [1, 1, 1], [2, 2, 2], 6
    assert ucb_select(node, 1.414) == 0


def test_ucb_scales_wins_by_simulations():
    one = ucb_scores([4], [8], 8, 0.0, k=1)
    sixteen = ucb_scores([64], [8], 8, 0.0, k=16)
    assert one == sixteen == [0.5]


def test_deferred_selections_resume_in_order():
    node = make_node()
    node.children[1] = PENDING
    for i in range(5):
        node.defer(1, i)
    assert node.deferred_count == 5
    assert node.resume(1, NodeRef(3, 9)) == [0, 1, 2, 3, 4]
    assert node.children[1] == NodeRef(3, 9)
    assert node.deferred_count == 0
    with pytest.raises(ValueError):
        node.resume(1, NodeRef(3, 9))


def test_best_move():
    node = make_node()
    assert node.unexpanded == [0, 1, 2]
    node.vis = [3, 7, 7]
    assert node.best_move() == 1


def test_route_packing():
    route = [RouteStep(0, 1, 2, 1), RouteStep(5, 77, 0, 2)]
    assert unpack_route(pack_route(route)) == route
    with pytest.raises(ValueError):
        unpack_route(pack_route(route)[:-1])


@pytest.fixture
def solo(make_system):
    return make_system(threads_per_process=1, hex_n=3, sims_per_request=4)


def test_single_rollout_expands_one_child(solo):
    search = Search(solo, HexGame(3))
    report = search.run_phase(1, timeout=30)
    assert search.node_count == 2
    assert report.root_visits == 1
    assert report.completions == 1
    assert search.root_node.vis_n == 1
    assert search.check_consistency() == []


def test_root_visits_match_cap(solo):
    search = Search(solo, HexGame(3))
    report = search.run_phase(100, timeout=30)
    assert report.root_visits == 100
    assert report.completions == 100
    assert search.check_consistency() == []
    root = search.root_node
    assert sum(root.vis) == root.vis_n == 100


def test_time_limited_phase_reports_what_ran(make_system):
    system = make_system(threads_per_process=2, hex_n=4, sims_per_request=4)
    search = Search(system, HexGame(4))
    cap = 10_000_000
    report = search.run_phase(cap, timeout=60, time_limit=0.3)
    assert 0 < report.rollouts < cap
    assert report.rollouts == report.completions == report.root_visits
    assert search.root_node.vis_n + search.root_node.leaf_visits == report.rollouts
    assert report.rollouts_per_sec == pytest.approx(report.rollouts / report.elapsed)
    assert search.check_consistency() == []


def test_zero_time_limit_runs_nothing(solo):
    search = Search(solo, HexGame(3))
    report = search.run_phase(50, timeout=30, time_limit=0)
    assert (report.rollouts, report.root_visits) == (0, 0)


def test_phases_accumulate(solo):
    search = Search(solo, HexGame(3))
    first = search.run_phase(40, timeout=30)
    second = search.run_phase(60, timeout=30)
    assert (first.phase, second.phase) == (1, 2)
    assert second.root_visits == 60
    assert search.root_node.vis_n == 100
    assert search.check_consistency() == []


@pytest.mark.parametrize("remote_only", [False, True])
def test_tree_spread_over_threads(make_system, remote_only):
    system = make_system(machines=2, threads_per_process=2, hex_n=4, sims_per_request=4,
                         mcts_remote_only=remote_only)
    search = Search(system, HexGame(4))
    report = search.run_phase(300, timeout=60)

    assert report.root_visits == 300
    assert report.completions == 300
    assert sum(report.completions_per_thread) == 300
    assert sum(report.visits_per_thread) >= 300
    assert search.check_consistency() == []
    owners = {node.ref.owner for node in search.nodes()}
    assert len(owners) > 1


def test_play_commits_best_moves(solo):
    search = Search(solo, HexGame(3))
    reports = search.play(2, cap=50, timeout=30)
    assert len(reports) == 2
    assert all(r.best_move is not None for r in reports)
    stones = search.root_node.state.cells
    assert sum(1 for cell in stones if cell) == 2
    assert search.root_node.state.cells[reports[0].best_move] == 1


def test_ucb_matches_direct_formula():
    rng = random.Random(11)
    for _ in range(10_000):
        k = rng.choice((1, 4, 16))
        n = rng.randint(1, 8)
        vis = [rng.randint(1, 50) for _ in range(n)]
        wins = [rng.randint(0, k * v) for v in vis]
        c = rng.uniform(0.0, 3.0)
        vis_n = sum(vis)
        direct = [w / (k * v) + c * math.sqrt(math.log(vis_n) / v) for w, v in zip(wins, vis)]
        node = make_node(n)
        node.wins, node.vis, node.vis_n = list(wins), list(vis), vis_n
        assert ucb_select(node, c, k) == direct.index(max(direct))


def visit_table(make_system):
    system = make_system(threads_per_process=1, hex_n=3, sims_per_request=4, seed=5)
    search = Search(system, HexGame(3))
    search.run_phase(200, timeout=30)
    return sorted((node.ref, tuple(node.vis), tuple(node.wins)) for node in search.nodes())


def test_seeded_search_is_deterministic(make_system):
    tables = [visit_table(make_system) for _ in range(3)]
    assert tables[0] == tables[1] == tables[2]


@lru_cache(maxsize=None)
def first_player_wins(cells: bytes, to_move: int) -> bool:
    board = HexBoard(3, cells, to_move)
    won = board.winner()
    if won:
        return won == P1
    outcomes = (first_player_wins(board.play(m).cells, other(to_move)) for m in board.legal_moves())
    return any(outcomes) if to_move == P1 else all(outcomes)


@pytest.mark.slow
def test_search_finds_a_winning_opening(make_system):
    system = make_system(threads_per_process=1, hex_n=3, sims_per_request=4, seed=1)
    search = Search(system, HexGame(3))
    report = search.run_phase(100_000, timeout=600)
    assert report.root_visits == 100_000
    move = report.best_move
    assert first_player_wins(HexBoard.empty(3).play(move).cells, P2)


@pytest.mark.slow
@pytest.mark.parametrize("placement", [(1, 1, 1), (1, 1, 4), (1, 2, 2)])
def test_full_phase_conserves_visits(make_system, placement):
    m, p, t = placement
    system = make_system(machines=m, processes_per_machine=p, threads_per_process=t, sims_per_request=4)
    search = Search(system, HexGame(system.settings.hex_n))
    report = search.run_phase(timeout=600)
    assert report.cap == 4096 * m * p * t
    assert report.root_visits == report.cap
    assert report.completions == report.cap
    assert search.check_consistency() == []
