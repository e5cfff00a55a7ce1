import init, { regularizationPath, bssSpectrum, Landscape } from "./pkg/roft_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

function frame(ctx, x0, y0, w, h) {
  ctx.strokeStyle = "#999";
  ctx.strokeRect(x0, y0, w, h);
}

// Plots each series in `ys` against `xs` inside the box (x0, y0, w, h).
function lines(ctx, box, xs, ys, opts = {}) {
  const [x0, y0, w, h] = box;
  frame(ctx, x0, y0, w, h);
  const all = ys.flat();
  const lo = opts.lo ?? Math.min(...all), hi = opts.hi ?? Math.max(...all);
  const xlo = Math.min(...xs), xhi = Math.max(...xs);
  const px = (x) => x0 + ((x - xlo) / (xhi - xlo || 1)) * w;
  const py = (y) => y0 + h - ((y - lo) / (hi - lo || 1)) * h;
  ys.forEach((s, k) => {
    ctx.strokeStyle = COLORS[k % COLORS.length];
    ctx.beginPath();
    s.forEach((y, i) => (i ? ctx.lineTo(px(xs[i]), py(y)) : ctx.moveTo(px(xs[i]), py(y))));
    ctx.stroke();
  });
  ctx.fillStyle = "#444";
  ctx.fillText(hi.toPrecision(3), x0 + 3, y0 + 11);
  ctx.fillText(lo.toPrecision(3), x0 + 3, y0 + h - 3);
  if (opts.labels) opts.labels.forEach((t, k) => {
    ctx.fillStyle = COLORS[k % COLORS.length];
    ctx.fillText(t, x0 + w - 110, y0 + 14 + 13 * k);
  });
}

function drawPath() {
  const r = JSON.parse(regularizationPath(num("rp-dim"), num("rp-seed"), 80));
  const ctx = $("rp").getContext("2d");
  ctx.clearRect(0, 0, 720, 260);
  const logd = r.deltas.map(Math.log10);
  lines(ctx, [10, 10, 340, 220], logd, [r.to_pre, r.to_star], { lo: 0, labels: ["to pre", "to star"] });
  ctx.fillText("log10 delta", 150, 250);

  const pts = r.path.concat([r.theta_pre, r.theta_star]);
  const xs = pts.map((p) => p[0]), ys = pts.map((p) => p[1]);
  const [x0, y0, w, h] = [370, 10, 340, 220];
  frame(ctx, x0, y0, w, h);
  const sx = (x) => x0 + 10 + ((x - Math.min(...xs)) / (Math.max(...xs) - Math.min(...xs) || 1)) * (w - 20);
  const sy = (y) => y0 + h - 10 - ((y - Math.min(...ys)) / (Math.max(...ys) - Math.min(...ys) || 1)) * (h - 20);
  ctx.strokeStyle = "#555";
  ctx.beginPath();
  r.path.forEach((p, i) => (i ? ctx.lineTo(sx(p[0]), sy(p[1])) : ctx.moveTo(sx(p[0]), sy(p[1]))));
  ctx.stroke();
  [[r.theta_star, COLORS[1], "star"], [r.theta_pre, COLORS[0], "pre"]].forEach(([p, c, t]) => {
    ctx.fillStyle = c;
    ctx.beginPath();
    ctx.arc(sx(p[0]), sy(p[1]), 4, 0, 2 * Math.PI);
    ctx.fill();
    ctx.fillText(t, sx(p[0]) + 6, sy(p[1]) - 4);
  });
}

let landscape = null, landscapeSeed = null;

function drawLandscape() {
  const seed = num("ls-seed");
  $("ls-msg").textContent = "training...";
  // let the message paint before the blocking call
  setTimeout(() => {
    const t0 = performance.now();
    if (landscapeSeed !== seed) {
      if (landscape) landscape.free();
      landscape = new Landscape(seed);
      landscapeSeed = seed;
    }
    const n = num("ls-points");
    const c = JSON.parse(landscape.wiseCurve(n));
    const g = JSON.parse(landscape.layerGrid(n));
    const ctx = $("ls").getContext("2d");
    ctx.clearRect(0, 0, 720, 300);
    lines(ctx, [10, 10, 340, 260], c.alphas, [c.val_auc, c.test_auc], { labels: ["val AUC", "test AUC"] });
    ctx.fillStyle = "#444";
    ctx.fillText("alpha (0 = pretrained, 1 = fine-tuned)", 80, 290);

    const flat = g.auc.flat(), lo = Math.min(...flat), hi = Math.max(...flat);
    const cell = 260 / g.alphas.length;
    g.auc.forEach((row, i) => row.forEach((v, j) => {
      const t = (v - lo) / (hi - lo || 1);
      ctx.fillStyle = `rgb(${Math.round(255 * (1 - t))}, ${Math.round(120 + 100 * t)}, ${Math.round(255 * t)})`;
      ctx.fillRect(400 + j * cell, 10 + i * cell, cell, cell);
    }));
    ctx.fillStyle = "#444";
    ctx.fillText(`layer 1 alpha ->   AUC ${lo.toFixed(3)} .. ${hi.toFixed(3)}`, 400, 290);
    $("ls-msg").textContent = `${Math.round(performance.now() - t0)} ms`;
  }, 10);
}

function drawSpectrum() {
  let r;
  try {
    r = JSON.parse(bssSpectrum(num("bs-rows"), num("bs-cols"), num("bs-k"), num("bs-delta"), 40, 0));
  } catch (e) {
    $("bs-msg").textContent = String(e);
    return;
  }
  $("bs-msg").textContent = `penalty ${r.penalty[0].toPrecision(3)} -> ${r.penalty.at(-1).toPrecision(3)}`;
  const ctx = $("bs").getContext("2d");
  ctx.clearRect(0, 0, 720, 260);
  const steps = r.steps.map((_, i) => i);
  const series = r.steps[0].map((_, j) => r.steps.map((s) => s[j]));
  lines(ctx, [10, 10, 700, 220], steps, series, { lo: 0 });
  ctx.fillStyle = "#444";
  ctx.fillText("step", 350, 250);
}

await init();
$("rp-go").onclick = drawPath;
$("ls-go").onclick = drawLandscape;
$("bs-go").onclick = drawSpectrum;
drawPath();
drawSpectrum();
