/**
 * Survey UI: a unit preview grid and a per-unit detail page with the patch
 * strip, whole-image context viewer, and the structured report form.
 *
 * Routing is hash-based: "#/" is the grid, "#/unit/<id>" a detail page.
 * Grid order always mirrors the API response order.
 */

import { ApiClient } from "./api.js";
import { DraftStore } from "./drafts.js";
import { ReportForm, emptyPhenomenon } from "./form.js";
import type { Lexicon, PatchEntry, UnitDetail, UnitSummary } from "./types.js";
import { CANCER_ASSOCIATIONS, NO_CATEGORY } from "./types.js";

const api = new ApiClient("");
const drafts = new DraftStore(window.localStorage);

const READER_KEY = "unitscope.reader_id";

function readerId(): string {
  let id = window.localStorage.getItem(READER_KEY);
  while (!id) {
    id = (window.prompt("Reader id (used to track your progress):") ?? "").trim();
  }
  window.localStorage.setItem(READER_KEY, id);
  return id;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") {
      node.className = value;
    } else {
      node.setAttribute(key, value);
    }
  }
  node.append(...children);
  return node;
}

function setRoot(...children: (Node | string)[]): HTMLElement {
  const root = document.getElementById("app")!;
  root.replaceChildren(...children);
  return root;
}

// ---------------------------------------------------------------------------
// grid page
// ---------------------------------------------------------------------------

async function renderGrid(): Promise<void> {
  const reader = readerId();
  let units: UnitSummary[];
  try {
    units = await api.listUnits(reader);
  } catch (err) {
    setRoot(
      el("div", { class: "banner error" },
        "Could not load units from the survey service. ",
        el("button", { class: "retry" }, "Retry"),
      ),
    ).querySelector("button")!.addEventListener("click", () => void renderGrid());
    return;
  }
  if (units.length === 0) {
    setRoot(el("div", { class: "banner" }, "No units are assigned in this survey."));
    return;
  }
  const done = units.filter((u) => u.complete).length;
  const cards = units.map((unit) =>
    el(
      "a",
      { class: "card" + (unit.complete ? " complete" : ""), href: `#/unit/${unit.unit_id}` },
      el("img", { src: unit.montage_url, alt: unit.unit_id, loading: "lazy" }),
      el("div", { class: "card-footer" },
        el("span", { class: "unit-name" }, unit.unit_id),
        el("span", { class: "badge" }, unit.complete ? "done" : "open"),
      ),
    ),
  );
  setRoot(
    el("header", {},
      el("h1", {}, "Unit survey"),
      el("span", { class: "progress" }, `${done}/${units.length} units annotated · reader ${reader}`),
    ),
    el("div", { class: "grid" }, ...cards),
  );
}

// ---------------------------------------------------------------------------
// detail page
// ---------------------------------------------------------------------------

function contextViewer(patch: PatchEntry): HTMLElement {
  const viewer = el("div", { class: "context" });
  const img = el("img", { src: patch.context_url, alt: `case ${patch.case_id}` });
  const box = el("div", { class: "rect" });
  img.addEventListener("load", () => {
    const sx = img.clientWidth / img.naturalWidth;
    const sy = img.clientHeight / img.naturalHeight;
    box.style.left = `${patch.x0 * sx}px`;
    box.style.top = `${patch.y0 * sy}px`;
    box.style.width = `${patch.w * sx}px`;
    box.style.height = `${patch.h * sy}px`;
  });
  viewer.append(img, box, el("div", { class: "context-caption" },
    `case ${patch.case_id} · window (${patch.x0}, ${patch.y0}) ${patch.w}×${patch.h}`));
  return viewer;
}

function formSection(form: ReportForm, lexicon: Lexicon, onStored: () => void): HTMLElement {
  const section = el("section", { class: "report-form" });

  const rerender = (): void => {
    const rows = form.recognizable
      ? form.phenomena.map((row, i) =>
          el("div", { class: "phenomenon-row" },
            el("input", {
              type: "text", value: row.description, placeholder: "Describe the phenomenon",
              "data-role": "description", "data-index": String(i),
            }),
            categorySelect(i, row.lexicon_category),
            associationSelect(i, row.cancer_association),
            el("button", { class: "remove", "data-index": String(i), title: "Remove row" }, "−"),
          ),
        )
      : [];
    const errors = form.errors();
    section.replaceChildren(
      el("h2", {}, "Structured report"),
      el("label", { class: "recognizable" },
        checkbox(form.recognizable),
        " These images show recognizable phenomena",
      ),
      ...(form.recognizable
        ? [el("div", { class: "rows" }, ...rows),
           el("button", { class: "add-row" }, "+ add phenomenon")]
        : [el("p", { class: "hint" }, "No phenomena will be recorded for this unit.")]),
      el("div", { class: "form-errors" },
        ...errors.map((e) => el("div", { class: "field-error" }, e))),
      el("button", {
        class: "submit",
        ...(form.canSubmit() ? {} : { disabled: "disabled" }),
      }, form.submitted ? "Submit again" : "Submit report"),
      el("div", { class: "submit-status" }),
    );

    section.querySelector("input[type=checkbox]")!.addEventListener("change", (ev) => {
      form.setRecognizable((ev.target as HTMLInputElement).checked);
      rerender();
    });
    section.querySelectorAll("input[data-role=description]").forEach((node) => {
      node.addEventListener("input", (ev) => {
        const target = ev.target as HTMLInputElement;
        form.updatePhenomenon(Number(target.dataset.index), { description: target.value });
        syncSubmitState();
      });
    });
    section.querySelectorAll("select").forEach((node) => {
      node.addEventListener("change", (ev) => {
        const target = ev.target as HTMLSelectElement;
        const index = Number(target.dataset.index);
        if (target.dataset.role === "category") {
          form.updatePhenomenon(index, { lexicon_category: target.value });
        } else {
          form.updatePhenomenon(index, { cancer_association: target.value });
        }
        syncSubmitState();
      });
    });
    section.querySelectorAll("button.remove").forEach((node) => {
      node.addEventListener("click", () => {
        form.removePhenomenon(Number((node as HTMLElement).dataset.index));
        rerender();
      });
    });
    section.querySelector("button.add-row")?.addEventListener("click", () => {
      form.addPhenomenon();
      rerender();
    });
    section.querySelector("button.submit")!.addEventListener("click", () => void doSubmit());
  };

  const syncSubmitState = (): void => {
    const button = section.querySelector("button.submit") as HTMLButtonElement;
    button.disabled = !form.canSubmit();
    const box = section.querySelector(".form-errors")!;
    box.replaceChildren(...form.errors().map((e) => el("div", { class: "field-error" }, e)));
  };

  const doSubmit = async (): Promise<void> => {
    const status = section.querySelector(".submit-status")!;
    status.textContent = "Saving…";
    const outcome = await form.submit();
    if (outcome.kind === "stored") {
      status.textContent = "Saved.";
      onStored();
      rerender();
    } else if (outcome.kind === "invalid") {
      status.textContent = "";
      syncSubmitState();
    } else if (outcome.kind === "rejected") {
      status.textContent = `The service rejected the report (${outcome.status}).`;
    } else {
      status.textContent = "Network problem; your draft is kept. Submit again to retry.";
    }
  };

  const checkbox = (checked: boolean): HTMLInputElement => {
    const box = el("input", { type: "checkbox" });
    box.checked = checked;
    return box;
  };

  const categorySelect = (index: number, value: string): HTMLSelectElement => {
    const select = el("select", { "data-role": "category", "data-index": String(index) });
    select.append(el("option", { value: NO_CATEGORY }, "(no lexicon category)"));
    for (const cat of lexicon.categories) {
      select.append(el("option", { value: cat.id }, cat.display_name));
    }
    select.value = value;
    return select;
  };

  const associationSelect = (index: number, value: string): HTMLSelectElement => {
    const select = el("select", { "data-role": "association", "data-index": String(index) });
    for (const assoc of CANCER_ASSOCIATIONS) {
      select.append(el("option", { value: assoc }, `association: ${assoc}`));
    }
    select.value = value;
    return select;
  };

  rerender();
  return section;
}

async function renderDetail(unitId: string): Promise<void> {
  const reader = readerId();
  let detail: UnitDetail;
  let lexicon: Lexicon;
  try {
    [detail, lexicon] = await Promise.all([api.unitDetail(unitId, reader), api.lexicon()]);
  } catch {
    window.location.hash = "#/";
    return;
  }
  const form = new ReportForm(api, drafts, lexicon, reader, unitId);
  form.hydrate(detail);
  if (form.phenomena.length === 0) {
    form.phenomena.push(emptyPhenomenon());
  }

  const contextPane = el("div", { class: "context-pane" });
  const firstPatch = detail.patches[0];
  if (firstPatch) {
    contextPane.append(contextViewer(firstPatch));
  }

  // the montage is the grid of segmented patches in score order; strip
  // thumbnails crop one grid cell each (2px separators frame the cells)
  const SEP = 2;
  const THUMB = 96;
  const n = detail.patches.length;
  const cols = Math.max(1, Math.ceil(Math.sqrt(n)));
  const probeImg = new Image();
  probeImg.src = detail.montage_url;
  const strip = el("div", { class: "strip" },
    ...detail.patches.map((patch, i) => {
      const thumb = el("div", { class: "strip-thumb" });
      probeImg.addEventListener("load", () => {
        const cell = (probeImg.naturalWidth - (cols + 1) * SEP) / cols;
        const scale = THUMB / cell;
        const row = Math.floor(i / cols);
        const col = i % cols;
        thumb.style.backgroundImage = `url("${detail.montage_url}")`;
        thumb.style.backgroundSize = `${probeImg.naturalWidth * scale}px auto`;
        thumb.style.backgroundPosition =
          `-${(SEP + col * (cell + SEP)) * scale}px -${(SEP + row * (cell + SEP)) * scale}px`;
      });
      const cellEl = el("figure", { class: "strip-cell" },
        thumb,
        el("figcaption", {}, `#${i + 1} · ${patch.score.toFixed(3)}`),
      );
      cellEl.addEventListener("click", () => {
        contextPane.replaceChildren(contextViewer(patch));
      });
      return cellEl;
    }),
  );

  setRoot(
    el("header", {},
      el("a", { href: "#/", class: "back" }, "← all units"),
      el("h1", {}, unitId),
    ),
    el("div", { class: "detail" },
      el("div", { class: "visuals" },
        el("img", { src: detail.montage_url, class: "montage", alt: `montage ${unitId}` }),
        el("h2", {}, "Top activating patches (score order)"),
        strip,
        el("h2", {}, "Whole-image context"),
        contextPane,
      ),
      formSection(form, lexicon, () => void 0),
    ),
  );
}

// ---------------------------------------------------------------------------

function route(): void {
  const hash = window.location.hash || "#/";
  const match = /^#\/unit\/(.+)$/.exec(hash);
  if (match && match[1]) {
    void renderDetail(decodeURIComponent(match[1]));
  } else {
    void renderGrid();
  }
}

window.addEventListener("hashchange", route);
window.addEventListener("DOMContentLoaded", route);
