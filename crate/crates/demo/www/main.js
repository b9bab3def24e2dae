import init, { label_alignment, attention_explorer, score_words } from "./pkg/wordintel_demo.js";

const $ = (id) => document.getElementById(id);

function words(container, list, classes) {
  container.replaceChildren(...list.map((w, i) => {
    const s = document.createElement("span");
    s.textContent = w;
    s.className = classes[i];
    return s;
  }));
}

function updateLabel() {
  const r = JSON.parse(label_alignment($("ref").value, $("resp").value));
  words($("label-words"), r.reference, r.correct.map((c) => (c ? "ok" : "bad")));
  const lines = r.pairs.map((p) => `${p.op}  ${p.ref ?? "·"} / ${p.hyp ?? "·"}`);
  $("label-ops").textContent = `ops ${r.ops}   cost ${r.cost}\n` + lines.join("\n");
}

let explorer = null;
let shownHead = 0;

function drawMap() {
  const map = explorer.maps[shownHead];
  const c = $("map");
  c.width = explorer.frames;
  c.height = explorer.chars;
  const ctx = c.getContext("2d");
  const img = ctx.createImageData(c.width, c.height);
  const max = Math.max(...map.flat());
  map.forEach((row, j) => row.forEach((v, t) => {
    const k = 4 * (j * c.width + t);
    const shade = 255 - Math.round(255 * v / max);
    img.data[k] = shade; img.data[k + 1] = shade; img.data[k + 2] = 255; img.data[k + 3] = 255;
  }));
  ctx.putImageData(img, 0, 0);
  const w = +$("word").value;
  const [a, b] = explorer.char_spans[w];
  ctx.fillStyle = "rgba(255,140,0,0.25)";
  ctx.fillRect(0, a, c.width, b - a);
}

function drawProfile() {
  const w = +$("word").value;
  const p = explorer.profiles[w];
  const c = $("profile");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const bw = c.width / p.weights.length;
  const max = Math.max(...p.weights, 1e-12);
  p.weights.forEach((v, t) => {
    ctx.fillStyle = explorer.encoder_mask[t] ? "#2a6" : "#ccc";
    const h = (c.height - 14) * v / max;
    ctx.fillRect(t * bw, c.height - h, Math.max(bw - 1, 1), h);
  });
  ctx.fillStyle = "#222";
  ctx.fillText(p.degenerate ? "degenerate: uniform fallback" : `word "${explorer.words[w]}"`, 4, 11);
}

function updateExplorer() {
  try {
    explorer = JSON.parse(attention_explorer(+$("seed").value, +$("topk").value, "local"));
  } catch (e) {
    $("heads").innerHTML = `<span class="err">${e}</span>`;
    return;
  }
  const sel = $("word");
  const keep = Math.min(+sel.value || 0, explorer.words.length - 1);
  sel.replaceChildren(...explorer.words.map((w, i) => new Option(`${i}: ${w}`, i)));
  sel.value = keep;
  $("heads").replaceChildren(...explorer.heads.map((h, i) => {
    const b = document.createElement("button");
    b.textContent = `L${h.layer}H${h.head} ${h.sharpness.toFixed(2)}`;
    if (h.rank !== null) b.className = "sel";
    b.title = h.rank !== null ? `selected, rank ${h.rank + 1}` : "not selected";
    b.onclick = () => { shownHead = i; drawMap(); };
    return b;
  }));
  drawMap();
  drawProfile();
}

function updateScore() {
  const out = $("score-out");
  try {
    const r = JSON.parse(score_words($("probs").value, $("truth").value, +$("thr").value));
    const fmt = (v) => (v === null ? "n/a" : v.toFixed(3));
    const c = r.confusion;
    out.innerHTML = `<p>Predicted <code>${r.predicted}</code>, sentence score ${fmt(r.score)}</p>
      <table><tr><th>F1</th><th>MCC</th><th>Acc.</th><th>Exact</th><th>TP</th><th>FP</th><th>TN</th><th>FN</th></tr>
      <tr><td>${fmt(r.f1)}${r.f1_degenerate ? "*" : ""}</td><td>${fmt(r.mcc)}${r.mcc_degenerate ? "*" : ""}</td>
      <td>${fmt(r.accuracy)}</td><td>${fmt(r.exact_match)}</td>
      <td>${c.tp}</td><td>${c.fp}</td><td>${c.tn}</td><td>${c.fn_}</td></tr></table>
      <p>Incorrect words are the positive class.</p>`;
  } catch (e) {
    out.innerHTML = `<span class="err">${e}</span>`;
  }
}

await init();
for (const id of ["ref", "resp"]) $(id).addEventListener("input", updateLabel);
for (const id of ["seed", "topk"]) $(id).addEventListener("input", updateExplorer);
$("word").addEventListener("change", () => { drawMap(); drawProfile(); });
for (const id of ["probs", "truth", "thr"]) $(id).addEventListener("input", updateScore);
updateLabel();
updateExplorer();
updateScore();
