/** Conversation state for the console: one in-flight question at a time,
 * entries appended in order, errors kept inline with a retry affordance. */

import { AskResponse, RetrievedDoc, ServiceApi } from './api.js';

export interface AnswerEntry {
  kind: 'answer';
  question: string;
  answer: string;
  thought: string;
  references: string[]; // exactly the service payload, unmodified
  refusal: boolean;
  retrieved: RetrievedDoc[];
  timestamp: string;
}

export interface ErrorEntry {
  kind: 'error';
  question: string; // preserved so the ask can be retried verbatim
  message: string;
  timestamp: string;
}

export type ConversationEntry = AnswerEntry | ErrorEntry;

/** Retrieved documents whose URL the answer actually cites (exact match). */
export function citedUrls(entry: AnswerEntry): Set<string> {
  const cited = new Set<string>();
  for (const doc of entry.retrieved) {
    if (entry.references.includes(doc.url)) {
      cited.add(doc.doc_id);
    }
  }
  return cited;
}

export class ConsoleStore {
  readonly entries: ConversationEntry[] = [];
  private pending = false;

  constructor(
    private readonly api: ServiceApi,
    private readonly now: () => Date = () => new Date(),
  ) {}

  get busy(): boolean {
    return this.pending;
  }

  /** Ask the service. Returns the appended entry, or null when the question
   * is blank or another question is already in flight (no request is sent in
   * either case). */
  async ask(rawQuestion: string): Promise<ConversationEntry | null> {
    const question = rawQuestion.trim();
    if (!question || this.pending) {
      return null;
    }
    this.pending = true;
    try {
      const payload = await this.api.ask(question);
      const entry = this.entryFrom(question, payload);
      this.entries.push(entry);
      return entry;
    } catch (error) {
      const entry: ErrorEntry = {
        kind: 'error',
        question,
        message: error instanceof Error ? error.message : String(error),
        timestamp: this.now().toISOString(),
      };
      this.entries.push(entry);
      return entry;
    } finally {
      this.pending = false;
    }
  }

  private entryFrom(question: string, payload: AskResponse): ConversationEntry {
    if (!payload.parse_ok) {
      return {
        kind: 'error',
        question,
        message: payload.error || 'the service could not parse a model answer',
        timestamp: this.now().toISOString(),
      };
    }
    return {
      kind: 'answer',
      question,
      answer: payload.answer,
      thought: payload.thought,
      references: payload.references,
      refusal: payload.refusal,
      retrieved: payload.retrieved,
      timestamp: this.now().toISOString(),
    };
  }
}
