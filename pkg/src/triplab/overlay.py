"""Prediction overlays: boxes on the frame, triplet text underneath.

Ground truth is written in black, correct predictions in green and wrong
ones in red; each predicted line takes the colour of its box outline.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from triplab.vocab import Vocabulary

GT_COLOR = (0, 0, 0)
HIT_COLOR = (0, 160, 0)
MISS_COLOR = (220, 0, 0)


def render_overlay(image: np.ndarray, vocab: Vocabulary, truth, predicted, boxes, scale: int = 4) -> Image.Image:
    """Compose one overlay frame; ``boxes`` holds ``(instrument, box, score)``."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    frame = Image.fromarray(arr, "RGB").resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
    font = ImageFont.load_default()
    truth = sorted(truth)
    predicted = sorted(predicted)
    line_h = 12
    panel = line_h * (len(truth) + len(predicted) + 2) + 4
    canvas = Image.new("RGB", (frame.width, frame.height + panel), (255, 255, 255))
    canvas.paste(frame, (0, 0))
    draw = ImageDraw.Draw(canvas)
    true_inst = {t[0] for t in truth}
    pred_ok = {t: t in set(truth) for t in predicted}
    for inst, (x0, y0, x1, y1), _ in boxes:
        hit = inst in true_inst and any(ok for t, ok in pred_ok.items() if t[0] == inst)
        draw.rectangle((x0 * scale, y0 * scale, x1 * scale - 1, y1 * scale - 1),
                       outline=HIT_COLOR if hit else MISS_COLOR, width=2)
    y = frame.height + 2
    draw.text((2, y), "ground truth:", fill=GT_COLOR, font=font)
    y += line_h
    for t in truth:
        draw.text((8, y), ", ".join(vocab.names(t)), fill=GT_COLOR, font=font)
        y += line_h
    draw.text((2, y), "predicted:", fill=GT_COLOR, font=font)
    y += line_h
    for t in predicted:
        draw.text((8, y), ", ".join(vocab.names(t)), fill=HIT_COLOR if pred_ok[t] else MISS_COLOR, font=font)
        y += line_h
    return canvas
