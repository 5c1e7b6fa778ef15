import xml.etree.ElementTree as ET

import numpy as np

from utils.plotting import render_panels, write_panels

SVG = '{http://www.w3.org/2000/svg}'


def _positions(root, gid):
    group = next(g for g in root.iter(f'{SVG}g') if g.get('id') == gid)
    return np.array([[float(u.get('x')), float(u.get('y'))] for u in group.iter(f'{SVG}use')])


def test_panels_share_layout():
    pts = np.random.default_rng(0).uniform(-3, 3, (25, 2))
    svg = render_panels([('a', pts), ('b', pts)], config_hash='abc123', limit=4.0)
    assert '<!-- ddss config_hash=abc123 panels=a|b -->' in svg
    root = ET.fromstring(svg)
    first, second = _positions(root, 'panel-0'), _positions(root, 'panel-1')
    assert len(first) == len(second) == 25
    np.testing.assert_allclose(first[:, 1], second[:, 1], atol=0.01)
    shift = second[:, 0] - first[:, 0]
    assert shift.min() > 0
    np.testing.assert_allclose(shift, shift[0], atol=0.01)


def test_rendering_is_reproducible(tmp_path):
    pts = np.random.default_rng(1).standard_normal((30, 2))
    a = render_panels([('real', pts)], config_hash='h1')
    b = render_panels([('real', pts)], config_hash='h1')
    assert a == b
    path = write_panels(str(tmp_path / 'sub' / 'p.svg'), [('real', pts)], config_hash='h1')
    with open(path, encoding='utf-8') as f:
        assert f.read() == a
