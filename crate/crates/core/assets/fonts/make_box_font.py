"""Builds GlyphForgeBox.ttf: a minimal TrueType font whose only inked glyph is
U+53E3 (a closed square box with a square counter). Used by the rasterizer tests
that need a glyph with an enclosed background region."""

from fontTools.fontBuilder import FontBuilder
from fontTools.pens.ttGlyphPen import TTGlyphPen

UPM = 1000


def box_glyph():
    pen = TTGlyphPen(None)
    # outer contour, clockwise
    pen.moveTo((100, -50))
    pen.lineTo((100, 750))
    pen.lineTo((900, 750))
    pen.lineTo((900, -50))
    pen.closePath()
    # inner contour, counter-clockwise
    pen.moveTo((260, 110))
    pen.lineTo((740, 110))
    pen.lineTo((740, 590))
    pen.lineTo((260, 590))
    pen.closePath()
    return pen.glyph()


def empty_glyph():
    return TTGlyphPen(None).glyph()


def main():
    fb = FontBuilder(UPM, isTTF=True)
    names = [".notdef", "space", "uni53E3"]
    fb.setupGlyphOrder(names)
    fb.setupCharacterMap({0x20: "space", 0x53E3: "uni53E3"})
    fb.setupGlyf({".notdef": empty_glyph(), "space": empty_glyph(), "uni53E3": box_glyph()})
    fb.setupHorizontalMetrics({".notdef": (1000, 0), "space": (500, 0), "uni53E3": (1000, 100)})
    fb.setupHorizontalHeader(ascent=880, descent=-120)
    fb.setupNameTable({"familyName": "GlyphForge Box", "styleName": "Regular"})
    fb.setupOS2(sTypoAscender=880, sTypoDescender=-120, usWinAscent=880, usWinDescent=120)
    fb.setupPost()
    fb.save("GlyphForgeBox.ttf")


if __name__ == "__main__":
    main()
