import init, { sample_mask, kept_patches, flops_curve, pos_embed } from "./pkg/mae_demo.js";

const $ = (section, name) => document.querySelector(`#${section} [name="${name}"]`);

function drawMask() {
  const sampling = $("mask", "sampling").value;
  const ratio = Number($("mask", "ratio").value);
  const side = Number($("mask", "side").value);
  const seed = Number(document.querySelector("#mask").dataset.seed || 0);
  $("mask", "ratio-out").value = ratio.toFixed(2);
  const canvas = document.querySelector("#mask canvas");
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / side;
  let bits;
  try {
    bits = sample_mask(side, ratio, sampling, seed);
  } catch (e) {
    $("mask", "summary").value = e.message ?? String(e);
    return;
  }
  let masked = 0;
  for (let i = 0; i < bits.length; i++) {
    const x = (i % side) * cell, y = Math.floor(i / side) * cell;
    ctx.fillStyle = bits[i] ? "#808080" : "#ffffff";
    ctx.fillRect(x, y, cell, cell);
    ctx.strokeStyle = "#ddd";
    ctx.strokeRect(x, y, cell, cell);
    masked += bits[i];
  }
  const n = side * side;
  const note = sampling === "grid" ? " (grid sampling always keeps one patch in four)" : "";
  $("mask", "summary").value =
    `${n - masked} of ${n} patches visible, len_keep(${n}, ${ratio.toFixed(2)}) = ${kept_patches(n, ratio)}${note}`;
}

function drawFlops() {
  const preset = $("flops", "preset").value;
  const depth = Number($("flops", "depth").value);
  const width = Number($("flops", "width").value);
  const pts = flops_curve(preset, depth, width, 96);
  const canvas = document.querySelector("#flops canvas");
  const ctx = canvas.getContext("2d");
  const pad = 36, w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  let top = 1;
  for (let i = 1; i < pts.length; i += 2) top = Math.max(top, pts[i]);
  top = Math.ceil(top);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.fillStyle = "#444";
  ctx.strokeRect(pad, pad, w, h);
  for (let y = 1; y <= top; y++) {
    const py = pad + h - ((y - 1) / (top - 1 || 1)) * h;
    ctx.fillText(`${y}×`, 4, py + 4);
  }
  for (const r of [0, 0.25, 0.5, 0.75, 0.95]) ctx.fillText(r.toString(), pad + (r / 0.95) * w - 6, pad + h + 16);
  ctx.strokeStyle = "#c33";
  ctx.lineWidth = 2;
  ctx.beginPath();
  let at75 = null;
  for (let i = 0; i < pts.length; i += 2) {
    const x = pad + (pts[i] / 0.95) * w;
    const y = pad + h - ((pts[i + 1] - 1) / (top - 1 || 1)) * h;
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    if (at75 === null && pts[i] >= 0.75) at75 = pts[i + 1];
  }
  ctx.stroke();
  ctx.lineWidth = 1;
  $("flops", "at75").value = `at mask ratio ≈ 0.75: ${at75.toFixed(2)}× more compute with mask tokens in the encoder`;
}

function heat(v) {
  // -1 → blue, 0 → white, 1 → red
  const t = Math.max(-1, Math.min(1, v));
  const a = Math.round(255 * (1 - Math.abs(t)));
  return t >= 0 ? [255, a, a] : [a, a, 255];
}

function paint(canvas, rows, cols, value) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(cols, rows);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const [R, G, B] = heat(value(r, c));
      const o = 4 * (r * cols + c);
      img.data.set([R, G, B, 255], o);
    }
  }
  const tmp = new OffscreenCanvas(cols, rows);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function drawPos() {
  const n = Number($("pos", "positions").value);
  let d = Number($("pos", "dim").value);
  d -= d % 2;
  const q = $("pos", "query");
  q.max = n - 1;
  const qi = Math.min(Number(q.value), n - 1);
  $("pos", "query-out").value = qi;
  const table = pos_embed(n, d);
  paint($("pos", "table"), n, d, (r, c) => table[r * d + c]);
  const norm = (r) => Math.hypot(...table.subarray(r * d, (r + 1) * d));
  const cos = (a, b) => {
    let s = 0;
    for (let k = 0; k < d; k++) s += table[a * d + k] * table[b * d + k];
    return s / (norm(a) * norm(b));
  };
  const side = Math.ceil(Math.sqrt(n));
  paint($("pos", "sim"), side, side, (r, c) => {
    const p = r * side + c;
    return p < n ? cos(qi, p) : 0;
  });
}

await init();
for (const el of document.querySelectorAll("#mask select, #mask input")) el.addEventListener("input", drawMask);
$("mask", "resample").addEventListener("click", () => {
  const s = document.querySelector("#mask");
  s.dataset.seed = Number(s.dataset.seed || 0) + 1;
  drawMask();
});
for (const el of document.querySelectorAll("#flops select, #flops input")) el.addEventListener("input", drawFlops);
for (const el of document.querySelectorAll("#pos input")) el.addEventListener("input", drawPos);
drawMask();
drawFlops();
drawPos();
