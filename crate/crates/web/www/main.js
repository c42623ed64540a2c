import init, { render_panel, panel_width, cost_table } from "./pkg/nted_web.js";

const CANVAS = 64;
const $ = (id) => document.getElementById(id);

function draw() {
  const seed = BigInt(Math.max(0, Number($("seed").value) | 0));
  const sharp = Number($("sharp").value);
  $("sharp-v").textContent = sharp.toFixed(1);
  const w = panel_width(CANVAS);
  const px = render_panel(seed, CANVAS, sharp);
  const canvas = $("panel");
  canvas.width = w;
  canvas.height = CANVAS;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(px), w, CANVAS), 0, 0);
}

function costs() {
  const rows = JSON.parse(cost_table(128, Number($("c").value) | 0, Number($("k").value) | 0));
  const fmt = (n) => n.toLocaleString();
  $("cost").innerHTML =
    "<tr><th>h*w</th><th>nted MACs</th><th>dense MACs</th><th>nted elems</th><th>dense elems</th></tr>" +
    rows
      .map((r) => `<tr><td>${r.positions}</td><td>${fmt(r.nted_macs)}</td><td>${fmt(r.vanilla_macs)}</td>` +
        `<td>${fmt(r.nted_allocs)}</td><td>${fmt(r.vanilla_allocs)}</td></tr>`)
      .join("");
}

await init();
$("seed").addEventListener("input", draw);
$("sharp").addEventListener("input", draw);
$("next").addEventListener("click", () => { $("seed").value = Number($("seed").value) + 1; draw(); });
$("c").addEventListener("input", costs);
$("k").addEventListener("input", costs);
draw();
costs();
