import itertools
import random

import pytest

from fabricrpc.exceptions import SerializationError
from fabricrpc.games import NONE, P1, P2, HexBoard, HexGame, evaluate
from fabricrpc.games.hex import random_playout


def test_legal_moves():
    game = HexGame(3)
    board = game.initial_state()
    assert len(game.legal_moves(board)) == 9
    board = game.apply(board, 4)
    assert len(game.legal_moves(board)) == 8
    assert game.to_move(board) == P2

    won = HexBoard.from_rows(["1..", "12.", "12."])
    assert game.legal_moves(won) == []


def test_play_on_occupied_cell():
    board = HexBoard.empty(3).play(0)
    with pytest.raises(ValueError):
        board.play(0)


def test_p1_connects_top_to_bottom():
    board = HexBoard.from_rows(["1..", "1.2", "1.2"])
    assert board.winner() == P1


def test_p2_connects_left_to_right():
    board = HexBoard.from_rows(["222", "1..", "11."])
    assert board.winner() == P2


def test_diagonal_neighbours_count():
    # (0,1) and (1,0) touch on a hex grid; (0,0) and (1,1) do not.
    assert HexBoard.from_rows([".1.", "1..", "..."]).winner() == NONE
    assert HexBoard.from_rows(["..1", ".1.", "1.."], to_move=P2).winner() == P1
    assert HexBoard.from_rows(["1..", ".1.", "..1"], to_move=P2).winner() == NONE


def test_from_rows_infers_player_to_move():
    assert HexBoard.from_rows(["1..", "...", "..."]).to_move == P2
    assert HexBoard.from_rows(["12.", "...", "..."]).to_move == P1
    with pytest.raises(ValueError):
        HexBoard.from_rows(["1..", ".."])


def _transposed_swap(cells: bytes, n: int) -> bytes:
    swap = {P1: P2, P2: P1}
    return bytes(swap[cells[c * n + r]] for r in range(n) for c in range(n))


def test_every_full_3x3_board_has_exactly_one_winner():
    n = 3
    for fill in itertools.product((P1, P2), repeat=n * n):
        cells = bytes(fill)
        p1_connects = HexBoard(n, cells).winner() == P1
        # P2's left-right connection is P1's top-bottom one on the mirrored board.
        p2_connects = HexBoard(n, _transposed_swap(cells, n)).winner() == P1
        assert p1_connects != p2_connects, HexBoard(n, cells)


@pytest.mark.parametrize("n", range(1, 8))
def test_random_full_boards_have_exactly_one_winner(n):
    rng = random.Random(n)
    for _ in range(50):
        order = list(range(n * n))
        rng.shuffle(order)
        board = HexBoard.empty(n)
        for cell in order:
            board = board.play(cell)
        p1_connects = board.winner() == P1
        p2_connects = HexBoard(n, _transposed_swap(board.cells, n)).winner() == P1
        assert p1_connects != p2_connects, board


@pytest.mark.parametrize("seed", range(10))
def test_winner_never_changes_once_decided(seed):
    rng = random.Random(seed)
    board = HexBoard.empty(7)
    moves = board.legal_moves()
    rng.shuffle(moves)
    decided = NONE
    for move in moves:
        board = board.play(move)
        won = board.winner()
        if decided:
            assert won == decided
        elif won:
            decided = won
    assert decided in (P1, P2)


def test_one_by_one_board():
    assert random_playout(HexBoard.empty(1), random.Random(0)) == P1


def test_playout_on_a_decided_board_plays_nothing():
    board = HexBoard.from_rows([".1.", ".1.", ".1."], to_move=P2)
    moves = []
    assert random_playout(board, random.Random(1), moves) == P1
    assert moves == []


def test_playout_is_seeded():
    board = HexBoard.empty(7)
    runs = []
    for _ in range(2):
        moves = []
        runs.append((random_playout(board, random.Random(42), moves), moves))
    assert runs[0] == runs[1]


@pytest.mark.parametrize("seed", range(20))
def test_playout_agrees_with_board_winner(seed):
    board = HexBoard.empty(5)
    moves = []
    won = random_playout(board, random.Random(seed), moves)
    for move in moves:
        board = board.play(move)
    assert board.winner() == won
    # The last stone decided the game.
    undone = bytearray(board.cells)
    undone[moves[-1]] = 0
    assert HexBoard(5, bytes(undone)).winner() == NONE


def test_evaluate_on_terminal_state():
    game = HexGame(3)
    won = HexBoard.from_rows(["1..", "12.", "12."])
    rng = random.Random(0)
    assert evaluate(game, won, 8, rng, player=P1) == 8
    assert evaluate(game, won, 8, rng, player=P2) == 0
    # Defaults to the player who just moved.
    assert evaluate(game, won, 8, rng) == 8


def test_evaluate_counts_wins():
    game = HexGame(5)
    wins = evaluate(game, game.initial_state(), 50, random.Random(3), player=P1)
    assert 0 <= wins <= 50
    with pytest.raises(ValueError):
        evaluate(game, game.initial_state(), 0, random.Random(3))


def test_state_serialization():
    board = HexBoard.from_rows(["1..", ".2.", "..."])
    assert HexBoard.deserialize(board.serialize()) == board
    with pytest.raises(SerializationError):
        HexBoard.deserialize(b"\x03")
    with pytest.raises(SerializationError):
        HexBoard.deserialize(bytes([3, 1]) + bytes(8))
    with pytest.raises(SerializationError):
        HexBoard.deserialize(bytes([1, 3, 0]))


@pytest.mark.parametrize("n", [0, 26])
def test_board_side_bounds(n):
    with pytest.raises(ValueError):
        HexGame(n)
