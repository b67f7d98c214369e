from fractions import Fraction

import numpy as np
import pytest

from mrrk.tableaux import (ArkPair, ButcherTableau, EmbeddedSet, builtin_catalogue, check_embedded_set,
                           elementary_weights, embedded_set_from_text, format_coefficient_file,
                           get_method, order_residuals, parse_coefficient, read_coefficient_file,
                           rooted_trees, tree_density, verify_order, weight_rank)

EXPLICIT = ["SSPRK(2,2)", "SSPRK(3,3)", "Heun(3,3)", "RK(4,4)", "Fehlberg(6,4)", "Fehlberg(6,5)", "DP(7,5)"]


def test_tree_counts():
    # number of rooted trees with n nodes
    assert [len(rooted_trees(n)) for n in range(1, 6)] == [1, 1, 2, 4, 9]


def test_tree_densities_of_small_trees():
    dens = sorted(tree_density(t) for t in rooted_trees(3))
    assert dens == [3, 6]  # bushy tree c^2 and tall tree A c


def test_parse_coefficient_exact():
    assert parse_coefficient("1/6") == Fraction(1, 6)
    assert parse_coefficient("-9/50") == Fraction(-9, 50)
    assert parse_coefficient("0.25") == Fraction(1, 4)
    assert parse_coefficient(" 0.1 ") == Fraction(1, 10)


@pytest.mark.parametrize("name", EXPLICIT)
def test_catalogue_sets_pass_their_audit(name):
    report = check_embedded_set(get_method(name))
    assert report.passed, report.failures
    assert report.abscissa_residual <= 1e-14


@pytest.mark.parametrize("name", ["ARK3(2)4L[2]SA", "ARK4(3)6L[2]SA"])
def test_ark_pairs(name):
    pair = get_method(name)
    assert isinstance(pair, ArkPair)
    assert pair.explicit.A[0, 0] == 0 and np.allclose(np.triu(pair.explicit.A), 0)
    diag = np.diag(pair.implicit.A)
    assert diag[0] == 0 and np.allclose(diag[1:], pair.gamma)
    for half in (pair.explicit, pair.implicit):
        assert check_embedded_set(half).passed
        assert np.allclose(half.A.sum(axis=1), half.c, atol=1e-14)


def test_classical_rk4_verifies_exactly_four():
    rk4 = get_method("RK(4,4)").method(0)
    assert verify_order(rk4) == 4
    assert np.max(np.abs(order_residuals(rk4, 5))) > 1e-3


def test_fehlberg_stack_verifies_as_published():
    """The four Fehlberg vectors share A and verify at (5, 4, 3, 3) together."""
    f65, f64 = get_method("Fehlberg(6,5)"), get_method("Fehlberg(6,4)")
    assert np.array_equal(f65.A, f64.A)
    stack = EmbeddedSet(f65.A, f65.c, np.vstack([f65.weights, f64.weights[1:]]), (5, 4, 3, 3))
    assert [verify_order(stack.method(k)) for k in range(4)] == [5, 4, 3, 3]
    assert np.allclose(stack.weights[1], f64.weights[0])
    assert weight_rank(stack.weights) == 3


def test_ssprk33_second_order_family_is_one_dimensional():
    A = get_method("SSPRK(3,3)").A
    for a in (0.1, 0.3, 0.45):
        t = ButcherTableau(A, [a, a, 1 - 2 * a], A.sum(axis=1), 2)
        assert verify_order(t) >= 2
    # breaking the a, a pattern loses order 2
    assert verify_order(ButcherTableau(A, [0.2, 0.3, 0.5], A.sum(axis=1), 2)) == 1


def test_dp_order4_weights_form_a_line():
    A = get_method("DP(7,5)").A
    trees = [t for q in range(1, 5) for t in rooted_trees(q)]
    M = np.array([elementary_weights(A, t) for t in trees])
    assert np.linalg.matrix_rank(M, tol=1e-10) == A.shape[0] - 1


def test_weight_rank_detects_dependence():
    W = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    assert weight_rank(W) == 2
    assert weight_rank(np.eye(3)) == 3


def test_check_reports_understated_vectors():
    base = get_method("RK(4,4)")
    bad = EmbeddedSet(base.A, base.c, base.weights, (4, 3), "bad")
    report = check_embedded_set(bad)
    assert not report.passed
    assert any("b2" in f for f in report.failures)


def test_check_reports_inconsistent_abscissae():
    base = get_method("SSPRK(2,2)")
    bad = EmbeddedSet(base.A, base.c + 1e-10, base.weights, base.orders, "bad")
    assert any("c - A e" in f for f in check_embedded_set(bad).failures)


def test_shape_validation():
    with pytest.raises(ValueError):
        EmbeddedSet(np.zeros((2, 2)), np.zeros(2), np.ones((2, 2)), (1,))
    with pytest.raises(ValueError):
        ButcherTableau(np.zeros((2, 2)), np.ones(3), np.zeros(2), 1)


@pytest.mark.parametrize("name", EXPLICIT)
def test_coefficient_file_round_trip(name):
    emb = get_method(name)
    again = embedded_set_from_text(format_coefficient_file(emb))
    assert np.array_equal(again.A, emb.A)
    assert np.array_equal(again.weights, emb.weights)
    assert np.array_equal(again.c, emb.c)
    assert again.orders == emb.orders


def test_reader_fills_upper_triangle_and_derives_c():
    text = """
    name toy
    orders 2 1
    A
    0
    1
    weights
    1/2 1/2
    1 0
    """
    data = read_coefficient_file(text)
    assert data["A"] == [[0, 0], [1, 0]]
    assert data["c"] == [0, 1]
    assert data["orders"] == (2, 1)


def test_reader_rejects_missing_blocks():
    with pytest.raises(ValueError):
        read_coefficient_file("name x\norders 1\nA\n0\n")


def test_subset_and_unknown_name():
    emb = get_method("DP(7,5)")
    assert emb.subset(2).count == 2
    with pytest.raises(ValueError):
        emb.subset(4)
    with pytest.raises(KeyError):
        get_method("RK(9,9)")


def test_catalogue_is_immutable():
    emb = builtin_catalogue()["RK(4,4)"]
    with pytest.raises(ValueError):
        emb.A[0, 0] = 1.0
