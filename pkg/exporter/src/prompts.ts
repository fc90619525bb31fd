/**
 * Prompt description files, same format the training pipeline reads:
 *   line 1: level=instance|bag; tag=<name>; polarity=positive|negative|n/a
 *   line 2: class template containing [CLASS] exactly once
 *   rest:   free-text visual description
 */
import * as fs from 'node:fs';

export interface PromptSpec {
  level: 'instance' | 'bag';
  tag: string;
  polarity: 'positive' | 'negative' | null;
  template: string;
  description: string;
  source: string;
}

export function parseDescriptionFile(filePath: string): PromptSpec {
  const lines = fs.readFileSync(filePath, 'utf8').split(/\r?\n/);
  if (lines.length < 2) {
    throw new Error(`${filePath}:1: expected a header line and a class template line`);
  }
  const fields = new Map<string, string>();
  for (const part of lines[0].split(';')) {
    const trimmed = part.trim();
    if (!trimmed) continue;
    const eq = trimmed.indexOf('=');
    if (eq < 0) {
      throw new Error(`${filePath}:1: malformed header field "${trimmed}"`);
    }
    fields.set(trimmed.slice(0, eq).trim(), trimmed.slice(eq + 1).trim());
  }
  const level = fields.get('level');
  const tag = fields.get('tag');
  const polarity = fields.get('polarity');
  if (fields.size !== 3 || !level || !tag || !polarity) {
    throw new Error(`${filePath}:1: header must define exactly level, tag, polarity`);
  }
  if (level !== 'instance' && level !== 'bag') {
    throw new Error(`${filePath}:1: level must be instance or bag, got "${level}"`);
  }
  if (!['positive', 'negative', 'n/a'].includes(polarity)) {
    throw new Error(`${filePath}:1: polarity must be positive, negative or n/a`);
  }
  const template = lines[1].trim();
  if (template.split('[CLASS]').length !== 2) {
    throw new Error(`${filePath}:2: class template must contain [CLASS] exactly once`);
  }
  const description = lines
    .slice(2)
    .map((l) => l.trim())
    .filter(Boolean)
    .join(' ');
  return {
    level,
    tag,
    polarity: polarity === 'n/a' ? null : (polarity as 'positive' | 'negative'),
    template,
    description,
    source: filePath,
  };
}
