import init, {
  demo_info,
  decode_utterance,
  sweep,
  halting_playground,
} from "./pkg/hsdacs_demo.js";

const $ = (id) => document.getElementById(id);

function setError(id, msg) {
  $(id).textContent = msg || "";
}

// ---------------------------------------------------------------------------
// Decode panel
// ---------------------------------------------------------------------------

function defaultThreshold(mode, info) {
  if (mode === "dacs") return info.dacs_threshold;
  return info.joint_threshold;
}

function renderTokens(ref, hyp) {
  const el = $("transcript");
  el.innerHTML = "";
  const mkRow = (label, tokens, other, markErrors) => {
    const row = document.createElement("div");
    const lbl = document.createElement("span");
    lbl.className = "lbl";
    lbl.textContent = label;
    row.appendChild(lbl);
    tokens.forEach((t, i) => {
      const s = document.createElement("span");
      s.className = "tok";
      if (markErrors) s.className += other[i] === t ? " ok" : " bad";
      s.textContent = t;
      row.appendChild(s);
    });
    return row;
  };
  el.appendChild(mkRow("ref", ref, hyp, false));
  el.appendChild(mkRow("hyp", hyp, ref, true));
}

function heat(value) {
  // black -> deep blue -> amber -> white
  const v = Math.max(0, Math.min(1, value));
  const r = Math.round(255 * Math.min(1, v * 1.8));
  const g = Math.round(255 * Math.pow(v, 1.4));
  const b = Math.round(90 + 120 * v * (1 - v) * 4 * 0.4 + 45 * v);
  return `rgb(${r},${g},${Math.min(255, b)})`;
}

function renderGrid(card, grid, boundaries) {
  const cell = 10;
  const canvas = card.querySelector("canvas");
  canvas.width = grid.cols * cell;
  canvas.height = grid.rows * cell;
  const ctx = canvas.getContext("2d");
  ctx.fillStyle = "#0d1117";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  let max = 0;
  for (const w of grid.weights) max = Math.max(max, w);
  if (max <= 0) max = 1;
  for (let i = 0; i < grid.rows; i++) {
    for (let j = 0; j < grid.cols; j++) {
      const w = grid.weights[i * grid.cols + j];
      if (w > 0) {
        ctx.fillStyle = heat(w / max);
        ctx.fillRect(j * cell, i * cell, cell - 1, cell - 1);
      }
    }
  }
  // Exposed boundary staircase.
  ctx.strokeStyle = "#39d2e0";
  ctx.lineWidth = 2;
  ctx.beginPath();
  for (let i = 0; i < grid.rows; i++) {
    const x = boundaries[i] * cell;
    ctx.moveTo(x, i * cell);
    ctx.lineTo(x, (i + 1) * cell);
    if (i + 1 < grid.rows) {
      ctx.lineTo(boundaries[i + 1] * cell, (i + 1) * cell);
    }
  }
  ctx.stroke();
}

function runDecode(info) {
  setError("decode-err", "");
  try {
    const mode = $("mode").value;
    const threshold = parseFloat($("thr").value);
    const m = parseInt($("mlook").value, 10);
    const utt = Math.max(0, Math.min(info.eval_utterances - 1, parseInt($("utt").value || "0", 10)));
    const res = JSON.parse(decode_utterance(mode, threshold, m, utt));
    renderTokens(res.reference, res.hypothesis);
    $("decode-stats").textContent =
      `edit distance ${res.edits} over ${res.reference.length} reference tokens - ` +
      `coverage ratio r = ${res.coverage_ratio.toFixed(3)} - ` +
      `encoder frames T = ${res.enc_len} - output steps ${res.boundaries.length}`;
    const grids = $("grids");
    grids.innerHTML = "";
    for (const g of res.grids) {
      const card = document.createElement("div");
      card.className = "grid-card";
      const h = document.createElement("h3");
      h.textContent = `layer ${g.layer} / head ${g.head}`;
      card.appendChild(h);
      card.appendChild(document.createElement("canvas"));
      grids.appendChild(card);
      renderGrid(card, g, res.boundaries);
    }
  } catch (e) {
    setError("decode-err", String(e));
  }
}

// ---------------------------------------------------------------------------
// Sweep panel
// ---------------------------------------------------------------------------

function drawSweep(rows) {
  const canvas = $("sweep-chart");
  const ctx = canvas.getContext("2d");
  const W = canvas.width;
  const H = canvas.height;
  ctx.clearRect(0, 0, W, H);
  ctx.fillStyle = "#0d1117";
  ctx.fillRect(0, 0, W, H);
  if (rows.length === 0) return;
  const pad = 42;
  const xs = rows.map((r) => r.threshold);
  const xmin = Math.min(...xs);
  const xmax = Math.max(...xs);
  const xAt = (t) => pad + ((t - xmin) / Math.max(1e-9, xmax - xmin)) * (W - 2 * pad);

  const series = [
    { key: "ratio", color: "#39d2e0", label: "coverage ratio r", max: 1 },
    { key: "error_rate", color: "#f0883e", label: "error rate %", max: Math.max(10, ...rows.map((r) => r.error_rate)) },
  ];
  ctx.font = "12px system-ui";
  series.forEach((s, si) => {
    ctx.strokeStyle = s.color;
    ctx.fillStyle = s.color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    rows.forEach((r, i) => {
      const x = xAt(r.threshold);
      const y = H - pad - (r[s.key] / s.max) * (H - 2 * pad);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
    rows.forEach((r) => {
      const x = xAt(r.threshold);
      const y = H - pad - (r[s.key] / s.max) * (H - 2 * pad);
      ctx.beginPath();
      ctx.arc(x, y, 3.5, 0, Math.PI * 2);
      ctx.fill();
    });
    ctx.fillText(s.label, pad + si * 160, 18);
  });
  ctx.fillStyle = "#8b97a5";
  rows.forEach((r) => {
    ctx.fillText(String(r.threshold), xAt(r.threshold) - 8, H - pad + 18);
  });
  ctx.fillText("threshold", W / 2 - 24, H - 6);
}

function runSweep() {
  setError("sweep-err", "");
  $("sweep-table").innerHTML = "running...";
  // Let the browser paint before the synchronous wasm call.
  setTimeout(() => {
    try {
      const rows = JSON.parse(
        sweep($("sweep-mode").value, $("sweep-thresholds").value, parseInt($("sweep-utts").value, 10))
      );
      drawSweep(rows);
      const tbl = document.createElement("table");
      tbl.innerHTML =
        "<tr><th>threshold</th><th>error %</th><th>r</th></tr>" +
        rows
          .map(
            (r) =>
              `<tr><td>${r.threshold}</td><td>${r.error_rate.toFixed(2)}</td><td>${r.ratio.toFixed(3)}</td></tr>`
          )
          .join("");
      $("sweep-table").innerHTML = "";
      $("sweep-table").appendChild(tbl);
    } catch (e) {
      $("sweep-table").innerHTML = "";
      setError("sweep-err", String(e));
    }
  }, 20);
}

// ---------------------------------------------------------------------------
// Playground panel
// ---------------------------------------------------------------------------

function runPlayground() {
  setError("pg-err", "");
  try {
    const res = JSON.parse(
      halting_playground($("pg-rows").value, parseFloat($("pg-theta").value), parseFloat($("pg-joint").value))
    );
    const tbl = document.createElement("table");
    let html = "<tr><th>head</th><th>halts at N</th><th>reason</th></tr>";
    res.per_head.forEach((h, i) => {
      html += `<tr><td>${i}</td><td>${h.n}</td><td>${h.reason}</td></tr>`;
    });
    html += `<tr><td>joint</td><td>${res.joint.n}</td><td>${res.joint.reason}</td></tr>`;
    tbl.innerHTML = html;
    const pooled = res.pooled.map((v) => v.toFixed(2)).join("  ");
    $("pg-out").innerHTML = "";
    $("pg-out").appendChild(tbl);
    const p = document.createElement("p");
    p.className = "hint";
    p.textContent = `pooled per-frame mass: ${pooled}`;
    $("pg-out").appendChild(p);
  } catch (e) {
    setError("pg-err", String(e));
  }
}

// ---------------------------------------------------------------------------

async function main() {
  await init();
  const info = JSON.parse(demo_info());
  $("utt").max = info.eval_utterances - 1;
  $("thr").value = info.joint_threshold;
  $("thr-out").textContent = info.joint_threshold.toFixed(2);
  $("mlook").value = info.max_lookahead;
  $("m-out").textContent = info.max_lookahead;

  const refresh = () => {
    $("thr-out").textContent = parseFloat($("thr").value).toFixed(2);
    $("m-out").textContent = $("mlook").value;
    runDecode(info);
  };
  $("mode").addEventListener("change", () => {
    $("thr").value = defaultThreshold($("mode").value, info);
    refresh();
  });
  for (const id of ["thr", "mlook", "utt"]) {
    $(id).addEventListener("input", refresh);
  }
  $("sweep-run").addEventListener("click", runSweep);
  $("pg-run").addEventListener("click", runPlayground);

  refresh();
  runPlayground();
}

main().catch((e) => {
  document.body.insertAdjacentHTML(
    "beforeend",
    `<p style="color:#ff7b72;padding:1rem 1.5rem">failed to start: ${e}</p>`
  );
});
