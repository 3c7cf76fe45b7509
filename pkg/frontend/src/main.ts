/** Bootstrap: wires the form, health indicator, and retry clicks. The base
 * URL is read from <meta name="service-base"> and defaults to same-origin. */

import { ServiceApi } from './api.js';
import { ConsoleStore } from './console.js';
import { renderConversation } from './render.js';

function baseUrl(): string {
  const meta = document.querySelector<HTMLMetaElement>('meta[name="service-base"]');
  return meta?.content?.replace(/\/$/, '') ?? '';
}

export function mountConsole(root: Document = document): ConsoleStore {
  const api = new ServiceApi(baseUrl());
  const store = new ConsoleStore(api);

  const form = root.querySelector<HTMLFormElement>('#ask-form')!;
  const input = root.querySelector<HTMLInputElement>('#question')!;
  const submit = root.querySelector<HTMLButtonElement>('#submit')!;
  const conversation = root.querySelector<HTMLElement>('#conversation')!;
  const health = root.querySelector<HTMLElement>('#health')!;

  function redraw(): void {
    conversation.innerHTML = renderConversation(store.entries);
    submit.disabled = store.busy;
    conversation.scrollTop = conversation.scrollHeight;
  }

  async function ask(question: string): Promise<void> {
    if (store.busy) {
      return;
    }
    submit.disabled = true;
    const entry = await store.ask(question);
    if (entry && entry.kind === 'answer') {
      input.value = ''; // errors keep the input so the analyst can edit and retry
    }
    redraw();
  }

  form.addEventListener('submit', (event) => {
    event.preventDefault();
    void ask(input.value);
  });

  conversation.addEventListener('click', (event) => {
    const target = event.target as HTMLElement;
    if (target.matches('button.retry')) {
      void ask(target.dataset.question ?? '');
    }
  });

  api
    .health()
    .then((payload) => {
      health.textContent = `connected: ${payload.models.generator} / ${payload.models.embedder} · ${payload.corpus_size} documents`;
      health.dataset.status = 'ok';
    })
    .catch(() => {
      health.textContent = 'service unreachable';
      health.dataset.status = 'down';
    });

  redraw();
  return store;
}

if (typeof document !== 'undefined' && document.querySelector('#ask-form')) {
  mountConsole();
}
