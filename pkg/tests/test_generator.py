from __future__ import annotations

import json
import threading
from pathlib import Path

import pytest
import soupsieve
from hypothesis import given, settings
from hypothesis import strategies as st

from agent_permissions.generator import (
    AllInputsFailed,
    CorpusDocument,
    CorpusElement,
    NoInputs,
    PolicyError,
    Unsynthesizable,
    compile_policies,
    load_corpus,
    load_policies,
    parse_policies,
    select_corpus,
    synthesize_selector,
    verify_soundness,
)
from agent_permissions.manifest import parse_manifest, serialize_manifest
from agent_permissions.validation import validate_manifest
from strategies import to_dom, to_soup, trees

SHOP = Path(__file__).parent / "fixtures" / "toy_shop"
PAGES = sorted(SHOP.glob("*.html"))


def corpus(*htmls: str) -> list[CorpusDocument]:
    return [CorpusDocument.from_html(f"doc{i}.html", h) for i, h in enumerate(htmls)]


def find(docs, selector) -> CorpusElement:
    (el,) = select_corpus(docs, selector)
    return el


def policies(*items):
    return parse_policies(json.dumps(list(items))).policies


# --- Policy format -----------------------------------------------------------------


def test_policy_file_forms():
    pf = load_policies(SHOP / "policies.json")
    assert len(pf.policies) == 7
    assert pf.metadata["author"] == "Toy Shop"
    bare = parse_policies('[{"effect": "deny", "verb": "click_element", "match": {"tag": "a"}}]')
    assert bare.metadata == {} and bare.policies[0].match.tag == "a"


@pytest.mark.parametrize(
    "policy, where",
    [
        ({"effect": "deny", "verb": "click_element", "match": {"tag": "a"},
          "modifiers": {"human_in_the_loop": True}}, "$[0]"),
        ({"effect": "deny", "verb": "click_element"}, "$[0]"),
        ({"effect": "allow", "verb": "click_element", "match": {"css": "a:hover"}}, "$[0].match.css"),
        ({"effect": "allow", "verb": "click_element", "match": {"tag": "a"},
          "modifiers": {"rate_limit": {"max_requests": 0, "window_seconds": 1}}}, "$[0].modifiers.rate_limit"),
        ({"guideline": {"directive": "SHALL", "description": "x"}}, "$[0].guideline.directive"),
        ({"effect": "allow", "verb": "click_element", "match": {"colour": "red"}}, "$[0].match"),
        ({"effect": "maybe", "verb": "click_element", "match": {"tag": "a"}}, "$[0].effect"),
    ],
)
def test_invalid_policies(policy, where):
    with pytest.raises(PolicyError) as info:
        parse_policies(json.dumps([policy]))
    assert info.value.path == where


def test_policy_file_not_json():
    with pytest.raises(PolicyError):
        parse_policies("{")


# --- Selector synthesis --------------------------------------------------------------


def test_unique_id_preferred():
    docs = corpus('<div class="x"><button id="post" class="x">Post</button></div>')
    assert synthesize_selector(find(docs, "button"), docs) == "#post"


def test_tag_qualified_class():
    docs = corpus('<a class="btn no-agent">a</a><a class="btn">b</a>')
    assert synthesize_selector(find(docs, ".no-agent"), docs) == "a.no-agent"


def test_class_pair():
    docs = corpus('<a class="btn big">a</a><a class="btn">b</a><a class="big">c</a>')
    assert synthesize_selector(find(docs, ".btn.big"), docs) == "a.btn.big"


def test_stable_attribute():
    docs = corpus('<form><input name="email" type="email"><input name="pw" type="password"></form>')
    assert synthesize_selector(find(docs, "[name=pw]"), docs) == 'input[name="pw"]'


def test_structural_path_from_unique_ancestor():
    docs = corpus(
        '<nav id="menu"><ul><li>a</li><li>b</li><li class="shop">c</li></ul></nav>'
        '<footer><ul><li class="shop">c</li></ul></footer>'
    )
    target = find(docs, "#menu li.shop")
    sel = synthesize_selector(target, docs)
    assert sel == "#menu > ul > li.shop"
    assert select_corpus(docs, sel) == [target]


def test_identical_siblings_are_unsynthesizable():
    docs = corpus('<nav id="menu"><ul><li>a</li><li>b</li><li>c</li></ul></nav>')
    third = [el for el in select_corpus(docs, "li")][2]
    with pytest.raises(Unsynthesizable):
        synthesize_selector(third, docs)


def test_uniqueness_is_corpus_wide():
    docs = corpus('<p id="post">a</p>', '<p id="post">b</p><p>c</p>')
    first = select_corpus(docs, "#post")[0]
    with pytest.raises(Unsynthesizable):
        synthesize_selector(first, docs)
    assert synthesize_selector(first, docs, allowed=select_corpus(docs, "#post")) == "#post"


def test_element_must_belong_to_corpus():
    a, b = corpus("<p>x</p>"), corpus("<p>y</p>")
    with pytest.raises(ValueError):
        synthesize_selector(find(a, "p"), b)


@settings(max_examples=80, deadline=None)
@given(tree=trees(max_nodes=30), pick=st.integers(0, 10**6))
def test_synthesized_selector_isolates_element(tree, pick):
    root, mapping = to_dom(tree)
    docs = [CorpusDocument("random", root)]
    nodes = list(tree.walk())
    target_o = nodes[pick % len(nodes)]
    target = CorpusElement(docs[0], docs[0].nodes.index(mapping[id(target_o)]))
    try:
        sel = synthesize_selector(target, docs)
    except Unsynthesizable:
        return
    assert select_corpus(docs, sel) == [target]
    soup_root, soup_map = to_soup(tree)
    hits = [o for o in nodes if soupsieve.match(sel, soup_map[id(o)])]
    assert hits == [target_o]


# --- Compilation ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def shop():
    docs, diags = load_corpus([SHOP])
    assert diags == []
    return docs


def test_toy_shop_manifest(shop):
    pf = load_policies(SHOP / "policies.json")
    m, report = compile_policies(pf.policies, shop, pf.metadata)
    assert serialize_manifest(m) == (SHOP / "expected_manifest.json").read_bytes()
    assert verify_soundness(m, report, shop, pf.policies) == []
    assert validate_manifest(parse_manifest(serialize_manifest(m))) == []
    assert [p.match_count for p in report.policies] == [7, 1, 1, 1, 0, 0, 0]
    assert report.policies[4].diagnostics[0].code == "ZERO_MATCHES"


def test_toy_shop_is_deterministic(shop):
    pf = load_policies(SHOP / "policies.json")
    first = serialize_manifest(compile_policies(pf.policies, shop, pf.metadata)[0])
    assert serialize_manifest(compile_policies(pf.policies, shop, pf.metadata)[0]) == first
    # Freshly parsed corpus, same input order: same bytes.
    reloaded, _ = load_corpus(PAGES)
    assert serialize_manifest(compile_policies(pf.policies, reloaded, pf.metadata)[0]) == first


def test_buy_links_two_products():
    docs = corpus(
        '<a class="btn" href="/cart/add?sku=1">Buy now</a><a class="btn" href="/wish">Save</a>',
        '<a class="btn" href="/cart/add?sku=2">BUY NOW</a>',
    )
    m, report = compile_policies(
        policies({"effect": "deny", "verb": "click_element", "match": {"text_contains": "buy"}}), docs
    )
    assert [r.selector for r in m.resource_rules] == ['a[href="/cart/add?sku=1"]', 'a[href="/cart/add?sku=2"]']
    assert all(not r.allowed for r in m.resource_rules)
    assert report.policies[0].match_count == 2


def test_shared_selector_when_it_covers_exactly():
    docs = corpus('<a class="buy" href="/1">Buy</a><a class="buy" href="/2">Buy</a><a href="/3">Home</a>')
    m, _ = compile_policies(
        policies({"effect": "deny", "verb": "click_element", "match": {"text_contains": "buy"}}), docs
    )
    assert [r.selector for r in m.resource_rules] == ["a.buy"]


def test_css_passthrough_verbatim():
    docs = corpus('<form id="contact"></form>')
    m, report = compile_policies(
        policies({"effect": "allow", "verb": "submit_form", "match": {"css": "form#contact"},
                  "modifiers": {"rate_limit": {"max_requests": 5, "window_seconds": 600}}}),
        docs,
    )
    (rule,) = m.resource_rules
    assert (rule.verb, rule.selector, rule.allowed) == ("submit_form", "form#contact", True)
    assert (rule.modifiers.rate_limit.max_requests, rule.modifiers.rate_limit.window_seconds) == (5, 600)
    assert report.policies[0].kind == "css"


def test_zero_matches_everywhere():
    docs = corpus("<p>nothing</p>")
    m, report = compile_policies(
        policies(
            {"effect": "deny", "verb": "click_element", "match": {"tag": "button"}},
            {"effect": "deny", "verb": "submit_form", "match": {"tag": "form"}},
        ),
        docs,
    )
    assert m.resource_rules == ()
    assert report.codes() == ["ZERO_MATCHES", "ZERO_MATCHES"]


def test_unsynthesizable_reported_and_skipped():
    docs = corpus('<ul><li>x</li><li>x</li></ul><ol><li>x</li></ol>')
    m, report = compile_policies(
        policies({"effect": "deny", "verb": "click_element", "match": {"tag": "li", "text_contains": "x"}}), docs
    )
    # Identical siblings cannot be split, but a path covering only matches is fine.
    assert [r.selector for r in m.resource_rules] == ["html > body > ul > li", "html > body > ol > li"]
    assert "UNSYNTHESIZABLE" not in report.codes()
    docs = corpus('<ul><li>x</li><li>y</li></ul>')
    m, report = compile_policies(
        policies({"effect": "deny", "verb": "click_element", "match": {"text_contains": "x"}}), docs
    )
    assert m.resource_rules == ()
    assert report.unsynthesizable


def test_guidelines_in_order():
    docs = corpus("<p>x</p>")
    m, report = compile_policies(
        policies(
            {"guideline": {"directive": "MUST", "description": "First."}},
            {"effect": "allow", "verb": "read_content", "match": {"any": True},
             "guideline": {"directive": "MAY", "description": "Second."}},
        ),
        docs,
    )
    assert [g.description for g in m.action_guidelines] == ["First.", "Second."]
    assert [r.selector for r in m.resource_rules] == ["*"]


def test_no_policies():
    with pytest.raises(PolicyError):
        compile_policies([], corpus("<p>x</p>"))


def test_report_renderings(shop):
    pf = load_policies(SHOP / "policies.json")
    _, report = compile_policies(pf.policies, shop, pf.metadata)
    text = report.to_text()
    assert text.startswith("corpus: 5 documents\n")
    assert "policy 4: deny click_element, 0 matches" in text
    assert json.loads(json.dumps(report.to_dict()))["policies"][0]["match_count"] == 7


# --- Corpus loading ------------------------------------------------------------------


def test_three_local_files():
    docs, diags = load_corpus(PAGES[:3])
    assert [Path(d.source).name for d in docs] == [p.name for p in PAGES[:3]]
    assert diags == []


def test_bad_local_inputs(tmp_path):
    (tmp_path / "ok.html").write_text("<p>x</p>")
    docs, diags = load_corpus([tmp_path / "ok.html", tmp_path / "missing.html"])
    assert len(docs) == 1 and [d.code for d in diags] == ["INPUT_FAILED"]
    with pytest.raises(AllInputsFailed):
        load_corpus([tmp_path / "missing.html"])
    with pytest.raises(NoInputs):
        load_corpus([])


def _site(fetcher, n_links=10):
    links = "".join(f'<a href="/p{i}">p{i}</a>' for i in range(n_links))
    fetcher.set("https://shop.test/", f"<body>{links}<a href='https://elsewhere.test/x'>x</a></body>",
                headers={"content-type": "text/html"})
    for i in range(n_links):
        fetcher.set(f"https://shop.test/p{i}", f'<p>page {i}</p><a href="/">home</a><a href="/p{i}#top">me</a>')
    fetcher.set("https://elsewhere.test/x", "<p>off-origin</p>")


def _no_wait(**kw):
    return dict(sleep=lambda s: None, delay=0.0, **kw)


def test_crawl_respects_max_pages(fake_fetcher):
    _site(fake_fetcher)
    docs, _ = load_corpus(["https://shop.test/"], max_pages=5, fetcher=fake_fetcher, **_no_wait())
    assert len(docs) == 5
    assert len(fake_fetcher.calls) == 5
    assert [d.source for d in docs] == ["https://shop.test/"] + [f"https://shop.test/p{i}" for i in range(4)]


def test_crawl_same_origin_and_dedup(fake_fetcher):
    _site(fake_fetcher, 3)
    docs, _ = load_corpus(["https://shop.test/", "https://shop.test/#x"], fetcher=fake_fetcher, **_no_wait())
    urls = [c[0] for c in fake_fetcher.calls]
    assert "https://elsewhere.test/x" not in urls
    assert len(urls) == len(set(urls)) == 4
    assert len(docs) == 4


def test_crawl_depth(fake_fetcher):
    _site(fake_fetcher, 3)
    docs, _ = load_corpus(["https://shop.test/"], max_depth=0, fetcher=fake_fetcher, **_no_wait())
    assert [d.source for d in docs] == ["https://shop.test/"]


def test_crawl_failures_are_diagnostics(fake_fetcher):
    fake_fetcher.set("https://shop.test/", '<a href="/missing">x</a><a href="/img">y</a>')
    fake_fetcher.set("https://shop.test/img", b"\x89PNG", headers={"content-type": "image/png"})
    docs, diags = load_corpus(["https://shop.test/"], fetcher=fake_fetcher, **_no_wait())
    assert len(docs) == 1
    assert sorted(d.path for d in diags) == ["https://shop.test/img", "https://shop.test/missing"]


def test_politeness_delay_per_origin(fake_fetcher):
    _site(fake_fetcher, 4)
    fake_fetcher.set("https://other.test/", "<p>x</p>")
    now = [0.0]
    lock = threading.Lock()
    waits = []

    def sleep(seconds):
        with lock:
            waits.append(seconds)

    docs, _ = load_corpus(
        ["https://shop.test/", "https://other.test/"],
        fetcher=fake_fetcher, delay=1.0, workers=4, sleep=sleep, clock=lambda: now[0],
    )
    assert len(docs) == 6
    # Frozen clock: the n-th request to shop.test waits n seconds; other.test never waits.
    assert sorted(waits) == [1.0, 2.0, 3.0, 4.0]
