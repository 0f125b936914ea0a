import init, { ShapeLab, FairLab, equivariance_probe, glyph_names } from "./pkg/equikit_demo.js";

const $ = (id) => document.getElementById(id);
const later = (f) => new Promise((ok) => setTimeout(() => ok(f()), 20));
const fmt = (x) => (x === null || x === undefined ? "" : Number(x).toFixed(3));

function parse(text, where) {
  const v = JSON.parse(text);
  if (v && v.error) {
    where.innerHTML = `<p class="err">${v.error}</p>`;
    return null;
  }
  return v;
}

function table(head, rows) {
  const th = head.map((h) => `<th>${h}</th>`).join("");
  const tr = rows.map((r) => "<tr>" + r.map((c) => `<td>${c}</td>`).join("") + "</tr>").join("");
  return `<table><tr>${th}</tr>${tr}</table>`;
}

await init();
const names = JSON.parse(glyph_names());

// rotated glyphs
let lab = null;
let noise = 0;
for (const [i, n] of names.entries()) $("shape-class").add(new Option(n, i));

function drawImage(img, side) {
  const ctx = $("shape-canvas").getContext("2d");
  const cell = 128 / side;
  for (let r = 0; r < side; r++) {
    for (let c = 0; c < side; c++) {
      const v = Math.max(0, Math.min(1, img[r * side + c]));
      const g = Math.round(255 * (1 - v));
      ctx.fillStyle = `rgb(${g},${g},${g})`;
      ctx.fillRect(c * cell, r * cell, cell, cell);
    }
  }
}

function classify() {
  const turns = Number($("shape-turns").value);
  $("shape-turns-v").textContent = turns;
  const res = parse(lab.classify(Number($("shape-class").value), turns, noise), $("shape-out"));
  if (!res) return;
  drawImage(res.image, res.side);
  const rows = res.rows.map((r) => {
    const best = r.probs.indexOf(Math.max(...r.probs));
    const extra = r.g_star != null ? `g* = ${r.g_star}` : r.weights ? "λ = " + r.weights.map(fmt).join(", ") : "";
    const bar = `<span class="bar" style="width:${Math.round(80 * r.probs[best])}px"></span>`;
    return [r.wrapper, names[best], bar + " " + fmt(r.probs[best]), extra];
  });
  $("shape-out").innerHTML = table(["", "prediction", "confidence", ""], rows);
}

$("shape-train").onclick = async () => {
  $("shape-status").textContent = " training (a few seconds)…";
  $("shape-train").disabled = true;
  lab = await later(() => new ShapeLab(0, 300));
  $("shape-status").textContent = " trained.";
  $("shape-controls").hidden = false;
  classify();
};
$("shape-class").onchange = classify;
$("shape-turns").oninput = classify;
$("shape-noise").onclick = () => { noise += 1; classify(); };
$("shape-score").onclick = async () => {
  $("shape-board").innerHTML = '<p class="status">scoring…</p>';
  const rows = await later(() => parse(lab.scoreboard(200), $("shape-board")));
  if (rows) {
    $("shape-board").innerHTML = table(["wrapper", "upright", "rotated"], rows.map((r) => [r.wrapper, fmt(r.upright), fmt(r.rot90)]));
  }
};

// equivariance probe
function probe() {
  const out = parse(
    equivariance_probe(Number($("probe-seed").value), $("probe-action").value, $("probe-wrapper").value),
    $("probe-out"),
  );
  if (out) $("probe-out").innerHTML = table(["g", "bare", "wrapped"], out.map((r) => [r.g, r.bare.toExponential(2), r.wrapped.toExponential(2)]));
}
for (const id of ["probe-action", "probe-wrapper", "probe-seed"]) $(id).onchange = probe;
probe();

// fair completion
let fair = null;
$("fair-train").onclick = async () => {
  $("fair-status").textContent = " training (a few seconds)…";
  $("fair-train").disabled = true;
  fair = await later(() => new FairLab(0, 400));
  $("fair-status").textContent = " trained.";
  $("fair-controls").hidden = false;
  $("fair-vocab").textContent = "vocabulary: " + JSON.parse(fair.vocabulary()).join(" ");
};
$("fair-go").onclick = () => {
  const out = parse(fair.generate($("fair-prompt").value.trim(), $("fair-method").value, 6), $("fair-out"));
  if (out) {
    $("fair-out").innerHTML = table(
      ["prompt", "completion", "sentiment", "g*"],
      out.map((r) => [r.prompt, r.completion, fmt(r.score), r.g_star.join(" ")]),
    );
  }
};
