import pytest

from hique.errors import TaxonomyError
from hique.taxonomy import (
    FOLLOW_UP_CODE,
    QuestionTaxonomy,
    Role,
    load_taxonomy,
    normalize_text,
    parse_taxonomy,
)


def test_builtin_counts(taxonomy):
    assert len(taxonomy.entries) == 85
    roles = [e.role for e in taxonomy.entries]
    assert roles.count(Role.PRIMARY) == 66
    assert roles.count(Role.FOLLOW_UP) == 19
    assert [e.index for e in taxonomy.entries] == list(range(1, 86))


@pytest.mark.parametrize(
    "index, text, role",
    [
        (3, "where are you from originally", Role.PRIMARY),
        (17, "what’s one of your most memorable experiences", Role.PRIMARY),
        (67, "can you tell me about that", Role.FOLLOW_UP),
        (85, "can you give me an example of that", Role.FOLLOW_UP),
    ],
)
def test_spot_rows_verbatim(taxonomy, index, text, role):
    entry = taxonomy[index]
    assert entry.text == text
    assert entry.role is role


def test_primaries_precede_follow_ups_and_codes_unique(taxonomy):
    primaries = [e for e in taxonomy.entries if e.is_primary]
    assert {e.index for e in primaries} == set(range(1, 67))
    codes = [e.topic_code for e in primaries]
    assert len(set(codes)) == 66 and all(codes)
    assert all(e.topic_code == FOLLOW_UP_CODE for e in taxonomy.entries if not e.is_primary)


def test_lookup_by_text(taxonomy):
    assert taxonomy.lookup_by_text("where are you from originally").index == 3
    assert taxonomy.lookup_by_text("WHERE ARE YOU FROM ORIGINALLY?").index == 3
    assert taxonomy.lookup_by_text("  where   are you from originally ") .index == 3
    assert taxonomy.lookup_by_text("what is your favorite color") is None
    # ASCII apostrophe matches the typographic one in the catalogue
    assert taxonomy.lookup_by_text("what's one of your most memorable experiences").index == 17


def test_every_entry_is_its_own_exact_match(taxonomy):
    for e in taxonomy.entries:
        assert taxonomy.lookup_by_text(normalize_text(e.text)) is e


def test_underscored_tokens_preserved(taxonomy):
    texts = " ".join(e.text for e in taxonomy.entries)
    assert "l_a" in texts
    assert "p_t_s_d" in texts


def test_round_trip(taxonomy, tmp_path):
    path = tmp_path / "q.tsv"
    taxonomy.save(path)
    assert load_taxonomy(path) == taxonomy
    assert parse_taxonomy(taxonomy.to_tsv()) == taxonomy


def test_84_rows_rejected(taxonomy):
    lines = taxonomy.to_tsv().splitlines()
    text = "\n".join(lines[:-1]) + "\n"
    with pytest.raises(TaxonomyError, match="expected 85 entries, found 84"):
        parse_taxonomy(text)


def test_wrong_role_tally_reported(taxonomy):
    tsv = taxonomy.to_tsv().replace("67\tfollow_up\tfollow_up", "67\tprimary\textra_code")
    with pytest.raises(TaxonomyError, match="found 67 primary / 18 follow-up"):
        parse_taxonomy(tsv)


def test_malformed_line_named(tmp_path, taxonomy):
    lines = taxonomy.to_tsv().splitlines()
    lines[4] = "4 primary broken line without tabs"
    path = tmp_path / "bad.tsv"
    path.write_text("\n".join(lines), encoding="utf-8")
    with pytest.raises(TaxonomyError, match=r"bad.tsv:5"):
        load_taxonomy(path)


def test_extension(fresh_taxonomy):
    e = fresh_taxonomy.extend("describe your morning routine in detail", Role.PRIMARY)
    assert e.index == 86
    f = fresh_taxonomy.extend("and how did that feel", Role.FOLLOW_UP)
    assert f.index == 87
    # same text again returns the existing entry
    assert fresh_taxonomy.extend("Describe your morning routine in detail?", Role.PRIMARY) is e
    assert len(fresh_taxonomy.entries) == 85
    assert [x.index for x in fresh_taxonomy.extension_entries] == [86, 87]
    reloaded = parse_taxonomy(fresh_taxonomy.to_tsv())
    assert reloaded == fresh_taxonomy
    assert reloaded.lookup_by_text("and how did that feel").index == 87


def test_extension_indexes_must_increase(taxonomy):
    from hique.taxonomy import QuestionEntry

    with pytest.raises(TaxonomyError):
        QuestionTaxonomy(taxonomy.entries, [QuestionEntry(90, "a", "x", Role.PRIMARY),
                                            QuestionEntry(88, "b", "y", Role.PRIMARY)])


def test_builtin_alias():
    assert load_taxonomy("builtin") == load_taxonomy()
