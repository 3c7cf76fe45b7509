/** HTML renderers for conversation entries. Pure string-in, string-out so
 * they are testable without a browser; main.ts mounts the output. */

import { AnswerEntry, ConversationEntry, ErrorEntry, citedUrls } from './console.js';

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
    .replace(/'/g, '&#39;');
}

function renderReferences(references: string[]): string {
  if (!references.length) {
    return '';
  }
  const links = references
    .map(
      (url) =>
        `<li><a href="${escapeHtml(url)}" target="_blank" rel="noopener">${escapeHtml(url)}</a></li>`,
    )
    .join('');
  return `<ul class="references">${links}</ul>`;
}

/** Context inspector: header, URL, similarity score, and a "cited" badge on
 * every document whose URL appears in the answer's references. Disabled when
 * the entry has no retrieved documents. */
export function renderInspector(entry: AnswerEntry): string {
  if (!entry.retrieved.length) {
    return '<details class="inspector" data-disabled="true"><summary>Retrieved context (none)</summary></details>';
  }
  const cited = citedUrls(entry);
  const rows = entry.retrieved
    .map((doc) => {
      const badge = cited.has(doc.doc_id) ? '<span class="badge cited">cited</span>' : '';
      return (
        `<li class="context-doc" data-doc-id="${escapeHtml(doc.doc_id)}">` +
        `<span class="score">${doc.score.toFixed(3)}</span> ` +
        `<span class="header">${escapeHtml(doc.header || '(summary document)')}</span> ${badge}` +
        `<br><a href="${escapeHtml(doc.url)}" target="_blank" rel="noopener" class="doc-url">${escapeHtml(doc.url)}</a>` +
        '</li>'
      );
    })
    .join('');
  return (
    `<details class="inspector"><summary>Retrieved context (${entry.retrieved.length})</summary>` +
    `<ol>${rows}</ol></details>`
  );
}

function renderAnswer(entry: AnswerEntry): string {
  const refusalClass = entry.refusal ? ' refusal' : '';
  const body = entry.refusal
    ? '<p class="no-answer">No answer available: the service declined because the retrieved context does not cover this question.</p>'
    : `<p class="answer-text">${escapeHtml(entry.answer)}</p>`;
  return (
    `<article class="entry answer${refusalClass}" data-kind="answer" data-refusal="${entry.refusal}">` +
    `<p class="question">${escapeHtml(entry.question)}</p>` +
    body +
    `<details class="thought"><summary>Reasoning</summary><p>${escapeHtml(entry.thought)}</p></details>` +
    renderReferences(entry.references) +
    renderInspector(entry) +
    `<time datetime="${escapeHtml(entry.timestamp)}">${escapeHtml(entry.timestamp)}</time>` +
    '</article>'
  );
}

function renderError(entry: ErrorEntry): string {
  return (
    '<article class="entry error" data-kind="error">' +
    `<p class="question">${escapeHtml(entry.question)}</p>` +
    `<p class="message">${escapeHtml(entry.message)}</p>` +
    `<button type="button" class="retry" data-question="${escapeHtml(entry.question)}">Retry</button>` +
    '</article>'
  );
}

export function renderEntry(entry: ConversationEntry): string {
  return entry.kind === 'answer' ? renderAnswer(entry) : renderError(entry);
}

export function renderConversation(entries: ConversationEntry[]): string {
  return entries.map(renderEntry).join('\n');
}
